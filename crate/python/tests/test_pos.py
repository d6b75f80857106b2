import json

from fakes import DictTagger
from iclcb_extractor.pos import tag_pos


def test_tag_file_covers_vocabulary(tmp_path):
    vocab = tmp_path / "vocab.json"
    vocab.write_text(json.dumps({"marker": "Ġ", "tokens": [
        {"id": 0, "surface": "school"},
        {"id": 1, "surface": "Ġschool"},
        {"id": 2, "surface": ","},
        {"id": 3, "surface": "Ġrun"},
        {"id": 4, "surface": "Ġzzq"},
    ]}))
    tagger = DictTagger({"school": ["NOUN"], "run": ["VERB", "NOUN"], ",": ["PUNCT"]})
    out = tmp_path / "pos.tsv"
    assert tag_pos(vocab, out, tagger) == 5
    rows = dict(l.split("\t") for l in out.read_text().splitlines())
    assert len(rows) == 5
    assert "NOUN" in rows["0"].split(",") and rows["1"] == rows["0"]
    assert rows["2"] == ""
    assert rows["3"] == "NOUN,VERB"
    assert rows["4"] == ""
