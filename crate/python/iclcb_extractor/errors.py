class ExtractorError(Exception):
    pass


class AlignmentError(ExtractorError):
    """Prompt tokenization disagrees with the recorded ids or positions."""


class ModelError(ExtractorError):
    """A model, tokenizer or tagger could not be loaded."""
