"""Exception types raised across the simulator."""


class HiddenWorldError(Exception):
    """Base class for all simulator errors."""


class GraphError(HiddenWorldError):
    pass


class DuplicateInstanceId(GraphError):
    pass


class UnknownAreaReference(GraphError):
    pass


class UnknownArea(GraphError):
    pass


class ContainmentCycle(GraphError):
    pass


class InvariantViolation(GraphError):
    pass


class UnboundVariable(HiddenWorldError):
    pass


class EffectIntegrityError(HiddenWorldError):
    pass


class UnknownLabel(HiddenWorldError):
    pass


class NoTemplate(HiddenWorldError):
    pass


class ScenarioSyntaxError(HiddenWorldError):
    """Raised when a scenario file cannot be parsed.

    ``diagnostics`` holds ``(line, column, message)`` triples; line numbers
    are 1-based.
    """

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(f"line {ln}:{col}: {msg}" for ln, col, msg in self.diagnostics))


class ReplayFailure(HiddenWorldError):
    def __init__(self, task_id, step, violated):
        self.task_id = task_id
        self.step = step
        self.violated = violated
        super().__init__(f"task {task_id!r} step {step}: {violated}")


class InitMismatch(HiddenWorldError):
    pass


class LengthMismatch(HiddenWorldError):
    pass


class ProtocolViolation(HiddenWorldError):
    pass


class ScenarioInvalid(HiddenWorldError):
    """Compilation refused because validation reported failures."""

    def __init__(self, report):
        self.report = report
        super().__init__("scenario failed validation:\n" + report.render())


class MalformedResponse(ProtocolViolation):
    """A planner reply that does not follow the message schema."""


class PlannerDisconnected(ProtocolViolation):
    """The remote planner closed the stream or stopped answering."""
