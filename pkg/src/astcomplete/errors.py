"""Exception types shared across the pipeline."""


class AstCompleteError(Exception):
    """Base class for all library errors."""


class ParseError(AstCompleteError, ValueError):
    """Input text is not a well-formed serialized AST."""

    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class StructureError(AstCompleteError, ValueError):
    """Parsed nodes do not form a single tree rooted at index 0."""

    def __init__(self, message, node_index=None):
        self.node_index = node_index
        if node_index is not None:
            message = f"node {node_index}: {message}"
        super().__init__(message)


class EmptyCorpusError(AstCompleteError, ValueError):
    pass


class ShapeError(AstCompleteError, ValueError):
    pass


class ConfigError(AstCompleteError, ValueError):
    pass


class DomainError(AstCompleteError, ValueError):
    pass


class DivergenceError(AstCompleteError, RuntimeError):
    """Training produced a non-finite loss."""
