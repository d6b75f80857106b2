import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Union

from .errors import AlignmentError
from .ranks import rank_of
from .records import RankRecord, read_positions, read_prompts, write_records

log = logging.getLogger(__name__)


class LensModel(Protocol):
    """A causal LM exposing per-layer logit-lens scores."""

    num_layers: int

    def tokenize(self, text: str) -> List[int]: ...

    def layer_scores(self, token_ids: Sequence[int], layers: Sequence[int]) -> Dict[int, "object"]:
        """Maps each layer to a `[len(token_ids), vocab]` score array.

        Layer 0 is the embedding output; layer `num_layers` is the last block,
        whose scores equal the model's ordinary output logits.
        """
        ...


@dataclass
class ExtractionJob:
    model_identifier: str
    prompt_file: Path
    positions_file: Path
    layers: Union[List[int], str]
    output: Path

    def resolve_layers(self, num_layers: int) -> List[int]:
        if self.layers == "all":
            return list(range(num_layers + 1))
        layers = list(self.layers)
        bad = [l for l in layers if not 0 <= l <= num_layers]
        if bad:
            raise ValueError(f"layers {bad} outside 0..{num_layers}")
        return layers


def parse_layers(spec: str) -> Union[List[int], str]:
    spec = spec.strip()
    if spec == "all":
        return "all"
    if not spec:
        return []
    return [int(x) for x in spec.split(",")]


def iter_records(job: ExtractionJob, model: LensModel) -> Iterator[RankRecord]:
    layers = job.resolve_layers(model.num_layers)
    if not layers:
        return
    positions = read_positions(job.positions_file)
    for prompt in read_prompts(job.prompt_file):
        wanted = positions.get(prompt.prompt_id, [])
        if not wanted:
            continue
        ids = model.tokenize(prompt.text)
        if ids != prompt.token_ids:
            raise AlignmentError(f"prompt {prompt.prompt_id}: tokenization differs from recorded ids")
        usable = []
        for p in wanted:
            if not 0 < p.position < len(ids) or ids[p.position] != p.sub_id:
                log.warning("prompt %s: skipping position %d", prompt.prompt_id, p.position)
                continue
            usable.append(p)
        if not usable:
            continue
        scores = model.layer_scores(ids, layers)
        for layer in layers:
            for p in usable:
                row = scores[layer][p.position - 1]
                yield RankRecord(
                    layer=layer,
                    position=p.position,
                    occurrence=p.occurrence,
                    orig_id=p.orig_id,
                    sub_id=p.sub_id,
                    orig_rank=rank_of(row, p.orig_id),
                    sub_rank=rank_of(row, p.sub_id),
                )


def extract(job: ExtractionJob, model: Optional[LensModel] = None) -> int:
    """Writes RankRecord JSONL to `job.output`; returns the record count."""
    if model is None:
        from .hf import HFLensModel

        model = HFLensModel.load(job.model_identifier)
    return write_records(job.output, iter_records(job, model))
