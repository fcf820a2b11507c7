class QuantToolkitError(Exception):
    pass


class ShapeMismatch(QuantToolkitError, ValueError):
    pass


class UnsupportedKind(QuantToolkitError, ValueError):
    pass


class EmptyTensor(QuantToolkitError, ValueError):
    pass


# Model and dataset files
class ParseError(QuantToolkitError, ValueError):
    pass


class BlobSizeMismatch(QuantToolkitError, ValueError):
    pass


class DanglingRef(QuantToolkitError, ValueError):
    pass


class CyclicGraph(QuantToolkitError, ValueError):
    pass


class BadMagic(QuantToolkitError, ValueError):
    pass


class Truncated(QuantToolkitError, ValueError):
    pass


class KTooLarge(QuantToolkitError, ValueError):
    pass


# Graph transforms
class OrphanBatchNorm(QuantToolkitError, ValueError):
    pass


class NoPatternFound(QuantToolkitError, ValueError):
    pass


class NonPositiveScale(QuantToolkitError, ValueError):
    pass


# Quantization and training
class EmptyCalibration(QuantToolkitError, ValueError):
    pass


class NonFiniteInput(QuantToolkitError, ValueError):
    pass


class NonFiniteGradient(QuantToolkitError, RuntimeError):
    pass


# Integer engine
class MissingSiteParams(QuantToolkitError, KeyError):
    pass


class AccumulatorOverflow(QuantToolkitError, OverflowError):
    def __init__(self, layer_id: str, value: int):
        super().__init__(f"int32 accumulator overflow in layer {layer_id!r}: {value}")
        self.layer_id = layer_id
        self.value = value


class BadVersion(QuantToolkitError, ValueError):
    pass


class Corrupt(QuantToolkitError, ValueError):
    pass


# Pipeline
class MissingPrerequisite(QuantToolkitError, RuntimeError):
    def __init__(self, artifact: str, stage: str):
        super().__init__(f"Missing {artifact}: run the '{stage}' stage first")
        self.artifact = artifact
        self.stage = stage


class FlagConflict(QuantToolkitError, ValueError):
    pass
