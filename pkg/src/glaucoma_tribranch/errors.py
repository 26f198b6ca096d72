"""Exception hierarchy.

The CLI maps the three top-level families onto exit codes:
ConfigError -> 2, DataError -> 3, everything else derived from
TriBranchError -> 4.
"""


class TriBranchError(Exception):
    pass


class ConfigError(TriBranchError, ValueError):
    pass


class DataError(TriBranchError):
    pass


class NumericError(TriBranchError, ArithmeticError):
    pass


class MissingFile(DataError, FileNotFoundError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing file: {self.path}")

    def __str__(self):
        return f"missing file: {self.path}"


class MalformedRow(DataError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"malformed row at line {line_no}: {reason}")


class DanglingReference(DataError):
    def __init__(self, path, line_no=None):
        self.path = str(path)
        self.line_no = line_no
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"referenced file does not exist: {self.path}{where}")


class EmptyClass(DataError):
    def __init__(self, label):
        self.label = label
        super().__init__(f"class {label} has no samples")


class EmptyMask(DataError):
    pass


class DegenerateCrop(DataError):
    pass


class TooFewSamples(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class ShapeError(TriBranchError, ValueError):
    pass


class DimMismatch(ShapeError):
    pass


class BatchMismatch(ShapeError):
    pass


class ShapeMismatch(ShapeError):
    pass


class WindowTooLarge(ConfigError):
    pass


class UnknownLayer(ConfigError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NonFiniteLoss(NumericError):
    def __init__(self, step, value, detail=""):
        self.step = step
        self.value = value
        msg = f"non-finite loss {value!r} at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
