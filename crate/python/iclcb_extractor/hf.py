"""Hugging Face causal LMs behind the `LensModel` and bridge tokenizer interfaces."""

from typing import Dict, List, Sequence

from .errors import ModelError

_FINAL_NORMS = ("transformer.ln_f", "model.norm", "gpt_neox.final_layer_norm", "model.decoder.final_layer_norm")


def _lookup(obj, dotted: str):
    for part in dotted.split("."):
        obj = getattr(obj, part, None)
        if obj is None:
            return None
    return obj


class HFLensModel:
    """Logit lens: intermediate states go through the final norm, then the LM head.

    The last entry of `hidden_states` already carries the final norm, so the
    top layer reproduces the model's output logits exactly.
    """

    def __init__(self, model, tokenizer):
        self.model = model
        self.tokenizer = tokenizer
        self.num_layers = int(model.config.num_hidden_layers)
        norms = (_lookup(model, p) for p in _FINAL_NORMS)
        self.final_norm = next((m for m in norms if m is not None), None)
        self.head = model.get_output_embeddings()

    @classmethod
    def load(cls, model_identifier: str) -> "HFLensModel":
        try:
            from transformers import AutoModelForCausalLM, AutoTokenizer

            tok = AutoTokenizer.from_pretrained(model_identifier)
            model = AutoModelForCausalLM.from_pretrained(model_identifier)
        except Exception as e:
            raise ModelError(f"cannot load {model_identifier!r}: {e}") from e
        model.eval()
        return cls(model, tok)

    def tokenize(self, text: str) -> List[int]:
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def layer_scores(self, token_ids: Sequence[int], layers: Sequence[int]) -> Dict[int, object]:
        import torch

        with torch.no_grad():
            out = self.model(torch.tensor([list(token_ids)]), output_hidden_states=True)
            result = {}
            for layer in layers:
                h = out.hidden_states[layer]
                if layer == self.num_layers:
                    result[layer] = out.logits[0].float().numpy()
                    continue
                if self.final_norm is not None:
                    h = self.final_norm(h)
                result[layer] = self.head(h)[0].float().numpy()
        return result


class HFBridgeTokenizer:
    """Adapts a Hugging Face tokenizer to the bridge protocol."""

    def __init__(self, tokenizer):
        self.tokenizer = tokenizer

    @classmethod
    def load(cls, model_identifier: str) -> "HFBridgeTokenizer":
        try:
            from transformers import AutoTokenizer

            return cls(AutoTokenizer.from_pretrained(model_identifier))
        except Exception as e:
            raise ModelError(f"cannot load tokenizer {model_identifier!r}: {e}") from e

    def encode(self, text: str) -> List[int]:
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def decode(self, ids: Sequence[int]) -> str:
        return self.tokenizer.decode(list(ids), clean_up_tokenization_spaces=False)

    def surface(self, token_id: int):
        if not 0 <= token_id < len(self.tokenizer):
            return None
        return self.tokenizer.convert_ids_to_tokens(token_id)
