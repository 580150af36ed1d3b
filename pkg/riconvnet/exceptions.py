# =============================
#      Geometry exceptions
# =============================


class GeometryException(Exception):
    """
    Raise a geometry exception. Easier to catch!
    """

    pass


class NonOrthogonalRotationException(GeometryException):
    """
    Raised when a rotation matrix is not orthogonal or has a determinant != +1.
    """

    pass


class EmptyPointSetException(GeometryException):
    """
    Raised when an operation needs at least one point and gets none.
    """

    pass


class CoincidentPointsException(GeometryException):
    """
    Raised when all points of a cloud coincide and no scale can be defined.
    """

    pass


# =============================
#      Sampling exceptions
# =============================


class SamplingException(Exception):
    """
    Raise a sampling exception. Easier to catch!
    """

    pass


class SampleSizeException(SamplingException):
    """
    Raised when the requested number of samples/neighbors is out of range.
    """

    pass


# =============================
#      Feature exceptions
# =============================


class FeatureException(Exception):
    """
    Raise a feature extraction exception. Easier to catch!
    """

    pass


class DegenerateNeighborhoodException(FeatureException):
    """
    Raised when every neighbor coincides with the reference point.
    """

    pass


# =============================
#       Layer exceptions
# =============================


class LayerException(Exception):
    """
    Raise a layer exception. Easier to catch!
    """

    pass


class ShapeMismatchException(LayerException):
    """
    Raised when tensor shapes are not consistent with the layer.
    """

    pass


class NonFiniteGradientException(LayerException):
    """
    Raised when an optimizer step receives a NaN/inf gradient.
    """

    pass


class NonFiniteActivationException(LayerException):
    """
    Raised when a forward pass produces NaN/inf activations.
    """

    pass


class CheckpointException(LayerException):
    """
    Raised when a checkpoint cannot be read or does not match the parameters.
    """

    pass


class RIConvConfigException(LayerException):
    """
    Raised when a convolution configuration is inconsistent.
    """

    pass


# =============================
#       Model exceptions
# =============================


class ModelException(Exception):
    """
    Raise a model exception. Easier to catch!
    """

    pass


class NetworkConfigException(ModelException):
    """
    Raised when a network configuration is inconsistent.
    """

    pass


class DivergenceException(ModelException):
    """
    Raised when the training loss becomes non-finite.
    """

    pass


# =============================
#        Data exceptions
# =============================


class DataException(Exception):
    """
    Raise a data exception. Easier to catch!
    """

    pass


class UnknownShapeClassException(DataException):
    """
    Raised when a synthetic shape class is not known.
    """

    pass


class ParseException(DataException):
    """
    Raised when a point/mesh file is malformed, carries the line number.
    """

    def __init__(self, message: str, path: str, line_number: int):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path: str = path
        self.line_number: int = line_number


class XYZParseException(ParseException):
    """
    Raised when an xyz file line cannot be parsed.
    """

    pass


class OFFParseException(ParseException):
    """
    Raised when an OFF header, vertex or face cannot be parsed.
    """

    pass


# =============================
#       Config exceptions
# =============================


class ConfigException(Exception):
    """
    Raise a configuration exception. Easier to catch!
    """

    pass


class UnknownConfigKeyException(ConfigException):
    """
    Raised when a configuration file holds a key that is not in the schema.
    """

    pass


class ConfigValueException(ConfigException):
    """
    Raised when a configuration value has the wrong type or is out of range.
    """

    pass


class MissingPathException(ConfigException):
    """
    Raised when a referenced file or directory does not exist.
    """

    pass
