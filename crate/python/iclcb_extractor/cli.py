import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .errors import AlignmentError, ExtractorError, ModelError
from .extract import ExtractionJob, extract, parse_layers

log = logging.getLogger("iclcb_extractor")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iclcb-extract")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("extract", help="logit-lens ranks for recorded positions")
    e.add_argument("--model", required=True)
    e.add_argument("--prompts", required=True, type=Path)
    e.add_argument("--positions", required=True, type=Path)
    e.add_argument("--layers", default="all", type=parse_layers, help='"all" or comma-separated indices')
    e.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("serve-tokenizer", help="answer bridge requests on stdin")
    s.add_argument("--model", required=True)

    t = sub.add_parser("tag-pos", help="POS tag TSV for a vocabulary file")
    t.add_argument("--vocab", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    return p


def run(args: argparse.Namespace) -> int:
    if args.command == "extract":
        job = ExtractionJob(args.model, args.prompts, args.positions, args.layers, args.out)
        n = extract(job)
        log.info("%d records", n)
    elif args.command == "serve-tokenizer":
        from .bridge import serve
        from .hf import HFBridgeTokenizer

        serve(HFBridgeTokenizer.load(args.model), sys.stdin, sys.stdout)
    elif args.command == "tag-pos":
        from .pos import NltkTagger, tag_pos

        tag_pos(args.vocab, args.out, NltkTagger())
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return run(args)
    except (ModelError, AlignmentError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1 if isinstance(e, ValueError) else 2
    except ExtractorError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
