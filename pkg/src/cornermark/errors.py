"""Exception types shared by the numerical core and its callers."""


class EmissionUnderflowError(FloatingPointError):
    """Every state has zero probability at some frame."""

    def __init__(self, frame: int, context: str = ""):
        self.frame = frame
        self.context = context
        msg = f"all states have zero probability at frame {frame}"
        super().__init__(f"{msg} ({context})" if context else msg)
