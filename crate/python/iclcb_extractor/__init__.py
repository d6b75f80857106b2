"""Secondary tooling for iclcb: logit-lens extraction, tokenizer bridge, POS tags."""

from .errors import AlignmentError, ExtractorError, ModelError
from .extract import ExtractionJob, extract
from .ranks import rank_of
from .records import RankRecord

__all__ = [
    "AlignmentError",
    "ExtractionJob",
    "ExtractorError",
    "ModelError",
    "RankRecord",
    "extract",
    "rank_of",
]
