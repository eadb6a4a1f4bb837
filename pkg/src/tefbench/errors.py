"""Exception hierarchy shared by all tefbench components."""


class TefbenchError(Exception):
    """Base class for every error raised by this package."""


# --- binary format -----------------------------------------------------------

class FormatError(TefbenchError):
    """A byte string violates the TEF wire format.

    ``rule`` names the first violated rule, ``offset`` the byte position at
    which it was detected.
    """

    def __init__(self, rule: str, offset: int, detail: str = ""):
        self.rule = rule
        self.offset = offset
        msg = f"{rule} at byte {offset}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class MalformedHeader(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class SectionOverflow(FormatError):
    pass


class NoExecSection(FormatError):
    pass


class InvariantViolation(TefbenchError):
    """An in-memory binary violates a structural invariant."""


class UnpackFailure(TefbenchError):
    """Payload carries the packed flag but is not well-formed RLE."""


class AlreadyPacked(TefbenchError):
    pass


class NotPacked(TefbenchError):
    pass


# --- corpus ------------------------------------------------------------------

class NoUsableIngredients(TefbenchError):
    pass


class IoFailure(TefbenchError):
    pass


# --- models ------------------------------------------------------------------

class DegenerateLabels(TefbenchError):
    pass


class DivergenceDetected(TefbenchError):
    pass


class InsufficientHoldout(TefbenchError):
    pass


class NotTreeModel(TefbenchError):
    pass


# --- environment / agents ----------------------------------------------------

class MalformedInput(TefbenchError):
    pass


class EpisodeFinished(TefbenchError):
    pass


class ExhaustedCorpus(TefbenchError):
    pass


class NonFiniteLoss(TefbenchError):
    pass


# --- orchestration / reporting -----------------------------------------------

class BudgetExceeded(TefbenchError):
    pass


class SurrogateDegenerate(TefbenchError):
    pass


class KTooLarge(TefbenchError):
    pass


class EmptyEvaluation(TefbenchError):
    pass


class MissingArtifacts(TefbenchError):
    pass


class TimedOut(TefbenchError):
    pass
