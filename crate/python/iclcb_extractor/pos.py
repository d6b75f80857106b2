import json
from pathlib import Path
from typing import Iterable, Protocol, Set, Tuple

from .errors import ModelError


class Tagger(Protocol):
    def tags(self, word: str) -> Set[str]: ...


class NltkTagger:
    """Universal tags from the NLTK perceptron tagger plus every WordNet part of speech."""

    _WORDNET = {"n": "NOUN", "v": "VERB", "a": "ADJ", "s": "ADJ", "r": "ADV"}

    def __init__(self):
        try:
            import nltk
            from nltk.corpus import wordnet

            nltk.pos_tag(["test"], tagset="universal")
            wordnet.synsets("test")
        except Exception as e:
            raise ModelError(f"nltk tagger unavailable: {e}") from e
        self._nltk = nltk
        self._wordnet = wordnet

    def tags(self, word: str) -> Set[str]:
        out = {self._nltk.pos_tag([word], tagset="universal")[0][1]}
        out.update(self._WORDNET[s.pos()] for s in self._wordnet.synsets(word))
        return out


def vocab_surfaces(path: Path) -> Tuple[str, Iterable[Tuple[int, str]]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return data["marker"], [(int(t["id"]), t["surface"]) for t in data["tokens"]]


def tag_rows(marker: str, tokens: Iterable[Tuple[int, str]], tagger: Tagger) -> Iterable[str]:
    for tid, surface in tokens:
        word = surface[len(marker):] if marker and surface.startswith(marker) else surface
        tags = tagger.tags(word) if any(c.isalpha() for c in word) else set()
        tags.discard("PUNCT")
        tags.discard(".")
        yield f"{tid}\t{','.join(sorted(tags))}"


def tag_pos(vocab: Path, out: Path, tagger: Tagger) -> int:
    marker, tokens = vocab_surfaces(vocab)
    rows = list(tag_rows(marker, tokens, tagger))
    Path(out).write_text("".join(r + "\n" for r in rows), encoding="utf-8")
    return len(rows)
