"""Exception hierarchy shared by the library, the CLI and the server.

Each error carries the process exit code the CLI reports for it:
0 ok / 2 usage / 3 undefined metric / 4 invariant breach.
"""


class DecodeLabError(Exception):
    exit_code = 4


class UsageError(DecodeLabError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class RecordParseError(UsageError):
    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class RecordValidationError(UsageError):
    def __init__(self, message: str, patient_id: str = None, line_number: int = None):
        where = f"patient {patient_id!r}" if patient_id else "record"
        if line_number is not None:
            where = f"line {line_number}, {where}"
        super().__init__(f"{where}: {message}")
        self.patient_id = patient_id
        self.line_number = line_number


class CheckpointNotFound(UsageError):
    pass


class UndefinedMetricError(DecodeLabError):
    exit_code = 3


class InvariantError(DecodeLabError):
    exit_code = 4


class ShapeError(InvariantError):
    def __init__(self, op: str, *shapes):
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")
        self.op = op
        self.shapes = shapes


class CheckpointError(InvariantError):
    pass
