"""
Synthetic labeled shapes and point cloud files.

Five primitives with analytic surfaces are sampled uniformly by area:

    sphere    unit sphere
    cube      [-1, 1]^3 surface
    cylinder  radius 1, z in [-1, 1], parts: body (side) and cap (both disks)
    cone      apex (0, 0, 1), base radius 1 at z = -1, parts: lateral and base
    torus     major radius 1, minor radius 0.4

Files: xyz text (one point per line, optional integer part label in a 4th
column) and OFF meshes sampled by triangle area. Datasets are written as a
directory of xyz files with a `manifest.json`.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
import trimesh
from numpy.typing import NDArray

from riconvnet.constants import MIN_SHAPE_POINTS, PART_NAMES, SHAPE_CLASSES
from riconvnet.exceptions import (
    DataException,
    MissingPathException,
    OFFParseException,
    ParseException,
    UnknownShapeClassException,
    XYZParseException,
)
from riconvnet.geom import PointCloud, Points, normalize_unit_sphere
from riconvnet.helpers import derive_seed, format_float, make_rng

logger = logging.getLogger("riconvnet")

MANIFEST_FILE: str = "manifest.json"
MANIFEST_VERSION: int = 1
MANIFEST_KEYS: Tuple[str, ...] = (
    "version",
    "class_names",
    "part_names",
    "class_parts",
    "train",
    "test",
)
TORUS_MAJOR_RADIUS: float = 1.0
TORUS_MINOR_RADIUS: float = 0.4

Labels = NDArray[np.int64]


# =================================
#         Synthetic shapes
# =================================


@dataclass(frozen=True)
class ShapeSpec:
    shape_class: str
    n_points: int
    jitter_sigma: float = 0.0
    # Part names in label order, a permutation of the class parts
    part_scheme: Optional[Tuple[str, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.shape_class not in SHAPE_CLASSES:
            raise UnknownShapeClassException(
                f"Unknown shape class '{self.shape_class}', expected one of"
                f" {SHAPE_CLASSES}."
            )
        if self.n_points < MIN_SHAPE_POINTS:
            raise DataException(
                f"A shape needs at least {MIN_SHAPE_POINTS} points, got"
                f" {self.n_points}."
            )
        if self.jitter_sigma < 0:
            raise DataException(f"Negative jitter sigma {self.jitter_sigma}.")
        if self.part_scheme is not None:
            parts = PART_NAMES.get(self.shape_class, [])
            if sorted(self.part_scheme) != sorted(parts):
                raise DataException(
                    f"Part scheme {list(self.part_scheme)} does not match the parts"
                    f" {parts} of a {self.shape_class}."
                )


def uniform_angles(rng: np.random.Generator, n: int) -> NDArray[np.float64]:
    return rng.uniform(0.0, 2 * math.pi, size=n)


def sample_sphere(rng: np.random.Generator, n: int) -> Tuple[Points, Labels]:
    # Antithetic pairs: the centroid of an even sample is the origin
    half = rng.standard_normal((math.ceil(n / 2), 3))
    half /= np.linalg.norm(half, axis=1, keepdims=True)
    return np.concatenate([half, -half])[:n], np.zeros(n, dtype=np.int64)


def sample_cube(rng: np.random.Generator, n: int) -> Tuple[Points, Labels]:
    faces = rng.integers(0, 6, size=n)
    points = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = faces // 2
    points[np.arange(n), axis] = np.where(faces % 2 == 0, -1.0, 1.0)
    return points, faces.astype(np.int64)


def sample_cylinder(rng: np.random.Generator, n: int) -> Tuple[Points, Labels]:
    # side 4 pi, each cap pi
    surfaces = rng.choice(3, size=n, p=[4 / 6, 1 / 6, 1 / 6])
    theta = uniform_angles(rng, n)
    radius = np.where(surfaces == 0, 1.0, np.sqrt(rng.random(n)))
    height = np.where(
        surfaces == 0,
        rng.uniform(-1.0, 1.0, size=n),
        np.where(surfaces == 1, 1.0, -1.0),
    )
    points = np.stack(
        [radius * np.cos(theta), radius * np.sin(theta), height], axis=1
    )
    # body 0, cap 1
    return points, (surfaces > 0).astype(np.int64)


def sample_cone(rng: np.random.Generator, n: int) -> Tuple[Points, Labels]:
    lateral_area = math.pi * math.sqrt(5.0)
    base_area = math.pi
    on_base = rng.random(n) < base_area / (lateral_area + base_area)
    theta = uniform_angles(rng, n)
    # Lateral area grows linearly with the distance to the apex
    radius = np.sqrt(rng.random(n))
    height = np.where(on_base, -1.0, 1.0 - 2.0 * radius)
    points = np.stack(
        [radius * np.cos(theta), radius * np.sin(theta), height], axis=1
    )
    # lateral 0, base 1
    return points, on_base.astype(np.int64)


def sample_torus(rng: np.random.Generator, n: int) -> Tuple[Points, Labels]:
    major, minor = TORUS_MAJOR_RADIUS, TORUS_MINOR_RADIUS
    accepted: List[Points] = []
    count = 0
    while count < n:
        theta = uniform_angles(rng, 2 * n)
        phi = uniform_angles(rng, 2 * n)
        # Surface element is proportional to the distance to the axis
        keep = rng.random(2 * n) < (major + minor * np.cos(phi)) / (major + minor)
        ring = major + minor * np.cos(phi[keep])
        batch = np.stack(
            [
                ring * np.cos(theta[keep]),
                ring * np.sin(theta[keep]),
                minor * np.sin(phi[keep]),
            ],
            axis=1,
        )
        accepted.append(batch)
        count += len(batch)
    return np.concatenate(accepted)[:n], np.zeros(n, dtype=np.int64)


SHAPE_SAMPLERS: Dict[
    str, Callable[[np.random.Generator, int], Tuple[Points, Labels]]
] = {
    "sphere": sample_sphere,
    "cube": sample_cube,
    "cylinder": sample_cylinder,
    "cone": sample_cone,
    "torus": sample_torus,
}


def gen_shape(spec: ShapeSpec) -> PointCloud:
    try:
        sampler = SHAPE_SAMPLERS[spec.shape_class]
    except KeyError as err:
        raise UnknownShapeClassException(
            f"No sampler for shape class '{spec.shape_class}'."
        ) from err
    rng = make_rng(spec.seed, spec.shape_class)
    points, surfaces = sampler(rng, spec.n_points)
    if spec.jitter_sigma > 0:
        points = points + rng.normal(0.0, spec.jitter_sigma, size=points.shape)
    part_labels = None
    if spec.part_scheme is not None:
        native = PART_NAMES[spec.shape_class]
        relabel = np.array([spec.part_scheme.index(name) for name in native])
        part_labels = relabel[surfaces]
    return normalize_unit_sphere(PointCloud(points=points, part_labels=part_labels))


# =================================
#             Datasets
# =================================


@dataclass
class Dataset:
    train: List[PointCloud]
    test: List[PointCloud]
    class_names: List[str]
    # Global part names "<class>/<part>" and the part ids of each class
    part_names: List[str] = field(default_factory=list)
    class_parts: List[List[int]] = field(default_factory=list)

    def __post_init__(self):
        for split in (self.train, self.test):
            for cloud in split:
                if cloud.class_label is None or not (
                    0 <= cloud.class_label < self.n_classes
                ):
                    raise DataException(
                        f"Class label {cloud.class_label} outside of"
                        f" {self.n_classes} classes."
                    )
                if cloud.part_labels is not None and self.part_names:
                    allowed = self.class_parts[cloud.class_label]
                    if not np.all(np.isin(cloud.part_labels, allowed)):
                        raise DataException(
                            f"Part labels of a {self.class_names[cloud.class_label]}"
                            f" outside of its parts {allowed}."
                        )

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_parts(self) -> int:
        return len(self.part_names)

    @property
    def has_parts(self) -> bool:
        return bool(self.part_names)


def part_layout(classes: Sequence[str]) -> Tuple[List[str], List[List[int]]]:
    part_names: List[str] = []
    class_parts: List[List[int]] = []
    for name in classes:
        if name not in PART_NAMES:
            raise DataException(f"Shape class '{name}' has no parts to segment.")
        first = len(part_names)
        part_names += [f"{name}/{part}" for part in PART_NAMES[name]]
        class_parts.append(list(range(first, len(part_names))))
    return part_names, class_parts


def make_dataset(
    classes: Sequence[str],
    per_class_train: int,
    per_class_test: int,
    jitter: float,
    seed: int,
    n_points: int = 1024,
    with_parts: bool = False,
) -> Dataset:
    """
    Balanced dataset of synthetic shapes. Every cloud is seeded from the class
    name, split and index, so the clouds do not depend on the class order.
    """
    if per_class_train < 1 or per_class_test < 1:
        raise DataException(
            f"Need at least one cloud per class and split, got {per_class_train}"
            f" train and {per_class_test} test."
        )
    if len(set(classes)) != len(classes):
        raise DataException(f"Duplicate shape classes in {list(classes)}.")
    part_names, class_parts = part_layout(classes) if with_parts else ([], [])
    splits: Dict[str, List[PointCloud]] = {"train": [], "test": []}
    for split, count in (("train", per_class_train), ("test", per_class_test)):
        for label, name in enumerate(classes):
            for index in range(count):
                spec = ShapeSpec(
                    shape_class=name,
                    n_points=n_points,
                    jitter_sigma=jitter,
                    part_scheme=tuple(PART_NAMES[name]) if with_parts else None,
                    seed=derive_seed(seed, name, split, index),
                )
                cloud = gen_shape(spec)
                part_labels = (
                    None
                    if cloud.part_labels is None
                    else cloud.part_labels + class_parts[label][0]
                )
                splits[split].append(
                    PointCloud(
                        points=cloud.points, part_labels=part_labels, class_label=label
                    )
                )
    logger.info(
        f"📦 Generated {len(splits['train'])} train / {len(splits['test'])} test"
        f" clouds of {n_points} points ({', '.join(classes)})"
    )
    return Dataset(
        train=splits["train"],
        test=splits["test"],
        class_names=list(classes),
        part_names=part_names,
        class_parts=class_parts,
    )


# =================================
#             xyz files
# =================================


def read_lines(path: str, error: Type[ParseException]) -> List[str]:
    """
    Text lines of a file, decoded one by one so that invalid UTF-8 is
    reported with its line number.
    """
    try:
        with open(path, "rb") as infile:
            raw_lines = infile.read().splitlines()
    except EnvironmentError as err:
        logger.error(err)
        raise
    lines = []
    for line_number, raw in enumerate(raw_lines, start=1):
        try:
            lines.append(raw.decode("utf-8"))
        except UnicodeDecodeError as err:
            raise error(f"not UTF-8 text ({err.reason})", path, line_number) from err
    return lines


def load_xyz(path: str, normalize: bool = False) -> PointCloud:
    points: List[List[float]] = []
    labels: List[int] = []
    columns: Optional[int] = None
    for line_number, line in enumerate(read_lines(path, XYZParseException), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) not in (3, 4):
            raise XYZParseException(
                f"expected 3 coordinates and an optional label, got {len(tokens)}"
                " values",
                path,
                line_number,
            )
        if columns is not None and len(tokens) != columns:
            raise XYZParseException(
                f"{len(tokens)} columns after {columns} column lines", path, line_number
            )
        columns = len(tokens)
        try:
            point = [float(token) for token in tokens[:3]]
            if columns == 4:
                labels.append(int(tokens[3]))
        except ValueError as err:
            raise XYZParseException(str(err), path, line_number) from err
        if not all(math.isfinite(value) for value in point):
            raise XYZParseException("non-finite coordinate", path, line_number)
        points.append(point)
    if not points:
        raise XYZParseException("no points", path, 1)
    cloud = PointCloud(
        points=np.array(points), part_labels=np.array(labels) if labels else None
    )
    return normalize_unit_sphere(cloud) if normalize else cloud


def write_xyz(cloud: PointCloud, path: str) -> None:
    lines = []
    for i, point in enumerate(cloud.points):
        line = " ".join(format_float(value) for value in point)
        if cloud.part_labels is not None:
            line += f" {cloud.part_labels[i]}"
        lines.append(line)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as outfile:
            outfile.write("\n".join(lines) + "\n")
    except EnvironmentError as err:
        logger.error(err)
        raise


# =================================
#            OFF meshes
# =================================


def parse_off(path: str) -> Tuple[Points, NDArray[np.int64]]:
    """
    Vertices (V, 3) and fan-triangulated faces (T, 3) of an OFF mesh. The
    counts may share the header line ("OFF 8 6 0"), '#' starts a comment.
    """
    content: List[Tuple[int, List[str]]] = []
    for line_number, line in enumerate(read_lines(path, OFFParseException), start=1):
        tokens = line.split("#", 1)[0].split()
        if tokens:
            content.append((line_number, tokens))
    if not content or not content[0][1][0].startswith("OFF"):
        raise OFFParseException("missing OFF header", path, 1)
    header_line, header = content[0]
    # "OFF8 6 0" and "OFF 8 6 0" both carry the counts
    inline = ([header[0][3:]] if len(header[0]) > 3 else []) + header[1:]
    body = content[1:]
    if inline:
        count_line, counts = header_line, inline
    elif body:
        (count_line, counts), body = body[0], body[1:]
    else:
        raise OFFParseException("missing vertex/face counts", path, header_line)
    try:
        n_vertices, n_faces = int(counts[0]), int(counts[1])
    except (ValueError, IndexError) as err:
        raise OFFParseException(f"bad counts {counts}", path, count_line) from err
    if n_vertices < 0 or n_faces < 0:
        raise OFFParseException(f"negative counts {counts}", path, count_line)
    if len(body) < n_vertices + n_faces:
        last = body[-1][0] if body else count_line
        raise OFFParseException(
            f"expected {n_vertices} vertices and {n_faces} faces, file ends early",
            path,
            last,
        )

    vertices = np.empty((n_vertices, 3))
    for i, (line_number, tokens) in enumerate(body[:n_vertices]):
        if len(tokens) < 3:
            raise OFFParseException("vertex needs 3 coordinates", path, line_number)
        try:
            vertices[i] = [float(token) for token in tokens[:3]]
        except ValueError as err:
            raise OFFParseException(str(err), path, line_number) from err

    triangles: List[Tuple[int, int, int]] = []
    for line_number, tokens in body[n_vertices : n_vertices + n_faces]:
        try:
            size = int(tokens[0])
            face = [int(token) for token in tokens[1 : 1 + size]]
        except ValueError as err:
            raise OFFParseException(str(err), path, line_number) from err
        if size < 3 or len(face) != size:
            raise OFFParseException(
                f"face needs at least 3 vertex indices, got {tokens}", path, line_number
            )
        if any(not 0 <= index < n_vertices for index in face):
            raise OFFParseException(
                f"face index out of range [0, {n_vertices})", path, line_number
            )
        # Fan triangulation of polygons
        triangles += [(face[0], face[j], face[j + 1]) for j in range(1, size - 1)]
    return vertices, np.array(triangles, dtype=np.int64).reshape(-1, 3)


def as_trimesh(vertices: Points, triangles: NDArray[np.int64]) -> trimesh.Trimesh:
    # Faces are kept as parsed, no merging or reordering
    return trimesh.Trimesh(vertices=vertices, faces=triangles, process=False)


def sample_mesh(
    vertices: Points,
    triangles: NDArray[np.int64],
    n_points: int,
    rng: np.random.Generator,
) -> Tuple[Points, NDArray[np.int64]]:
    """
    Area weighted surface sample. Returns the points and the triangle each
    was drawn from.
    """
    mesh = as_trimesh(vertices, triangles)
    if not mesh.area > 0:
        raise DataException("Mesh has no surface to sample from.")
    points, chosen = trimesh.sample.sample_surface(mesh, n_points, seed=rng)
    return np.asarray(points, dtype=np.float64), np.asarray(chosen, dtype=np.int64)


def load_off_sampled(
    path: str, n_points: int, seed: int, normalize: bool = True
) -> PointCloud:
    vertices, triangles = parse_off(path)
    if len(triangles) == 0:
        raise DataException(f"{path}: mesh holds no face.")
    points, _ = sample_mesh(vertices, triangles, n_points, np.random.default_rng(seed))
    logger.debug(
        f"Sampled {n_points} points from {path} ({len(vertices)} vertices,"
        f" {len(triangles)} triangles)"
    )
    cloud = PointCloud(points=points)
    return normalize_unit_sphere(cloud) if normalize else cloud


# =================================
#        Dataset directories
# =================================


def write_dataset(dataset: Dataset, directory: str) -> None:
    manifest: Dict = {
        "version": MANIFEST_VERSION,
        "class_names": dataset.class_names,
        "part_names": dataset.part_names,
        "class_parts": dataset.class_parts,
    }
    for split, clouds in (("train", dataset.train), ("test", dataset.test)):
        split_dir = os.path.join(directory, split)
        if not os.path.exists(split_dir):
            os.makedirs(split_dir)
        entries = []
        for i, cloud in enumerate(clouds):
            assert cloud.class_label is not None
            file_name = os.path.join(
                split, f"{i:05d}_{dataset.class_names[cloud.class_label]}.xyz"
            )
            write_xyz(cloud, os.path.join(directory, file_name))
            entries.append({"file": file_name, "class_label": cloud.class_label})
        manifest[split] = entries
    try:
        with open(os.path.join(directory, MANIFEST_FILE), "w") as outfile:
            json.dump(manifest, outfile, indent=2, separators=(",", ": "))
    except EnvironmentError as err:
        logger.error(err)
        raise
    logger.info(f"💾 Dataset written to {directory}")


def read_manifest(directory: str) -> Dict:
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise MissingPathException(f"No dataset manifest at '{manifest_path}'.")
    try:
        with open(manifest_path, "r") as infile:
            manifest = json.load(infile)
    except json.JSONDecodeError as err:
        raise DataException(
            f"{manifest_path}:{err.lineno}: invalid JSON ({err.msg})."
        ) from err
    if not isinstance(manifest, dict):
        raise DataException(f"{manifest_path}: the manifest is not a JSON object.")
    missing = [key for key in MANIFEST_KEYS if key not in manifest]
    if missing:
        raise DataException(f"{manifest_path}: missing manifest field(s) {missing}.")
    if manifest["version"] != MANIFEST_VERSION:
        raise DataException(
            f"Dataset manifest version {manifest['version']}, expected"
            f" {MANIFEST_VERSION}."
        )
    return manifest


def load_dataset(directory: str) -> Dataset:
    manifest = read_manifest(directory)
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    splits: Dict[str, List[PointCloud]] = {}
    for split in ("train", "test"):
        splits[split] = []
        for i, entry in enumerate(manifest[split]):
            if "file" not in entry or "class_label" not in entry:
                raise DataException(
                    f"{manifest_path}: {split}[{i}] needs 'file' and 'class_label'."
                )
            cloud = load_xyz(os.path.join(directory, entry["file"]))
            splits[split].append(
                PointCloud(
                    points=cloud.points,
                    part_labels=cloud.part_labels,
                    class_label=entry["class_label"],
                )
            )
    return Dataset(
        train=splits["train"],
        test=splits["test"],
        class_names=manifest["class_names"],
        part_names=manifest["part_names"],
        class_parts=manifest["class_parts"],
    )
