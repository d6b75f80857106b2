import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List

from .errors import AlignmentError


@dataclass(frozen=True)
class RankRecord:
    layer: int
    position: int
    occurrence: int
    orig_id: int
    sub_id: int
    orig_rank: int
    sub_rank: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    text: str
    token_ids: List[int]


@dataclass(frozen=True)
class Position:
    prompt_id: str
    position: int
    occurrence: int
    orig_id: int
    sub_id: int


def _jsonl(path: Path) -> Iterable[dict]:
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as e:
                    raise AlignmentError(f"{path}:{n}: {e}") from e


def read_prompts(path: Path) -> List[Prompt]:
    return [
        Prompt(d["prompt_id"], d["text"], [int(t) for t in d["token_ids"]])
        for d in _jsonl(path)
    ]


def read_positions(path: Path) -> Dict[str, List[Position]]:
    out: Dict[str, List[Position]] = defaultdict(list)
    for d in _jsonl(path):
        p = Position(
            d["prompt_id"], int(d["position"]), int(d["occurrence"]), int(d["orig_id"]), int(d["sub_id"])
        )
        out[p.prompt_id].append(p)
    return dict(out)


def write_records(path: Path, records: Iterable[RankRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")
            n += 1
    return n
