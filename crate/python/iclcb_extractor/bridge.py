"""Line protocol: `ENC <json>` -> `IDS ...`, `DEC ...` -> `TXT <json>`, `SURF <id>` -> `TXT <json>`."""

import json
from typing import List, Optional, Protocol, Sequence, TextIO


class BridgeTokenizer(Protocol):
    def encode(self, text: str) -> List[int]: ...

    def decode(self, ids: Sequence[int]) -> str: ...

    def surface(self, token_id: int) -> Optional[str]: ...


def _ids(payload: str) -> List[int]:
    out = []
    for part in payload.split():
        if not part.isdigit():
            raise ValueError(f"bad id {part!r}")
        out.append(int(part))
    return out


def _txt(text: str) -> str:
    return "TXT " + json.dumps(text, ensure_ascii=False)


def handle_request(tokenizer: BridgeTokenizer, line: str) -> str:
    """Answers one request line; malformed requests yield an `ERR` line."""
    line = line.rstrip("\r\n")
    verb, _, payload = line.partition(" ")
    try:
        if verb == "ENC":
            try:
                text = json.loads(payload)
            except json.JSONDecodeError as e:
                raise ValueError(f"bad ENC payload: {e}") from e
            if not isinstance(text, str):
                raise ValueError("ENC payload is not a string")
            return " ".join(["IDS", *map(str, tokenizer.encode(text))])
        if verb == "DEC":
            return _txt(tokenizer.decode(_ids(payload)))
        if verb == "SURF":
            if not payload.strip().isdigit():
                raise ValueError(f"bad SURF id {payload!r}")
            s = tokenizer.surface(int(payload))
            if s is None:
                raise ValueError(f"unknown token id {payload.strip()}")
            return _txt(s)
        raise ValueError(f"unknown request {verb!r}")
    except Exception as e:
        return "ERR " + str(e).replace("\n", " ")


def serve(tokenizer: BridgeTokenizer, inp: TextIO, out: TextIO) -> None:
    for line in inp:
        out.write(handle_request(tokenizer, line) + "\n")
        out.flush()
