"""Model adapters: what the HTTP layer needs from a causal language model.

Two implementations: a built-in character-level model with seeded random
weights (``tiny-char``) that loads with no downloads and keeps smoke tests
hermetic, and a Hugging Face hub adapter for real open-weight checkpoints.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import torch

TINY_CHAR_MODEL = "tiny-char"


@dataclass(frozen=True)
class ServerConfig:
    model: str = TINY_CHAR_MODEL
    device: str = "cpu"
    max_context: int = 256
    default_top_n: int = 10
    port: int = 8080

    def __post_init__(self):
        if self.default_top_n < 2:
            raise ValueError("default_top_n must be >= 2")
        if not 1 <= self.port <= 65535:
            raise ValueError("port must be in [1, 65535]")
        if self.max_context < 1:
            raise ValueError("max_context must be >= 1")


class ModelAdapter(ABC):
    """One forward pass' worth of surface: tokenizer both ways plus the
    full post-softmax distribution after a context."""

    @property
    @abstractmethod
    def name(self) -> str: ...

    @property
    @abstractmethod
    def vocab_size(self) -> int: ...

    @property
    @abstractmethod
    def eos_id(self) -> int: ...

    @property
    @abstractmethod
    def max_context(self) -> int: ...

    @abstractmethod
    def tokenize(self, text: str) -> list[int]: ...

    @abstractmethod
    def token_text(self, token_id: int) -> str: ...

    @abstractmethod
    def detokenize(self, ids: Sequence[int]) -> str: ...

    @abstractmethod
    def next_token_probs(self, context: Sequence[int]) -> list[float]:
        """Post-softmax probabilities (temperature 1) over the vocabulary."""

    def check_ids(self, ids: Sequence[int]) -> None:
        for token_id in ids:
            if not 0 <= token_id < self.vocab_size:
                raise ValueError(f"token id {token_id} outside vocabulary")


class CharCausalLM(ModelAdapter):
    """Character-level GPT-2 architecture with seeded random weights.

    Untrained, so its outputs carry no meaning, but it is a real causal LM
    forward pass: deterministic in eval mode, exact round-trip tokenizer
    over printable ASCII plus newline/tab, and a designated end-of-sequence
    token that renders as the empty string.
    """

    def __init__(self, config: ServerConfig):
        from transformers import GPT2Config, GPT2LMHeadModel

        self._chars = [chr(c) for c in range(32, 127)] + ["\n", "\t"]
        self._index = {ch: i for i, ch in enumerate(self._chars)}
        self._eos_id = len(self._chars)
        self._max_context = config.max_context
        torch.manual_seed(0)
        model_config = GPT2Config(
            vocab_size=len(self._chars) + 1,
            n_positions=config.max_context,
            n_embd=32,
            n_layer=2,
            n_head=2,
            eos_token_id=self._eos_id,
            bos_token_id=self._eos_id,
        )
        self._model = GPT2LMHeadModel(model_config).to(config.device)
        self._model.eval()
        self._device = config.device

    @property
    def name(self) -> str:
        return TINY_CHAR_MODEL

    @property
    def vocab_size(self) -> int:
        return len(self._chars) + 1

    @property
    def eos_id(self) -> int:
        return self._eos_id

    @property
    def max_context(self) -> int:
        return self._max_context

    def tokenize(self, text: str) -> list[int]:
        try:
            return [self._index[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"untokenizable character {exc.args[0]!r}") from None

    def token_text(self, token_id: int) -> str:
        self.check_ids([token_id])
        return "" if token_id == self._eos_id else self._chars[token_id]

    def detokenize(self, ids: Sequence[int]) -> str:
        self.check_ids(ids)
        return "".join(self.token_text(i) for i in ids)

    def next_token_probs(self, context: Sequence[int]) -> list[float]:
        self.check_ids(context)
        with torch.no_grad():
            input_ids = torch.tensor([list(context)], dtype=torch.long, device=self._device)
            logits = self._model(input_ids).logits[0, -1]
        return logits.double().softmax(dim=-1).tolist()


class HubCausalLM(ModelAdapter):
    """Adapter over a Hugging Face causal LM checkpoint."""

    def __init__(self, config: ServerConfig):
        from transformers import AutoModelForCausalLM, AutoTokenizer

        torch.manual_seed(0)
        self._tokenizer = AutoTokenizer.from_pretrained(config.model)
        self._model = AutoModelForCausalLM.from_pretrained(config.model).to(config.device)
        self._model.eval()
        self._device = config.device
        self._name = config.model
        self._vocab_size = int(self._model.config.vocab_size)
        eos = self._tokenizer.eos_token_id
        if eos is None:
            eos = getattr(self._model.config, "eos_token_id", None)
        if eos is None:
            raise ValueError(f"model {config.model} declares no end-of-sequence token")
        self._eos_id = int(eos)
        model_limit = getattr(self._model.config, "max_position_embeddings", config.max_context)
        self._max_context = min(config.max_context, int(model_limit))

    @property
    def name(self) -> str:
        return self._name

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    @property
    def eos_id(self) -> int:
        return self._eos_id

    @property
    def max_context(self) -> int:
        return self._max_context

    def tokenize(self, text: str) -> list[int]:
        return list(self._tokenizer.encode(text, add_special_tokens=False))

    def token_text(self, token_id: int) -> str:
        self.check_ids([token_id])
        return self._tokenizer.decode([token_id])

    def detokenize(self, ids: Sequence[int]) -> str:
        self.check_ids(ids)
        return self._tokenizer.decode(list(ids))

    def next_token_probs(self, context: Sequence[int]) -> list[float]:
        self.check_ids(context)
        with torch.no_grad():
            input_ids = torch.tensor([list(context)], dtype=torch.long, device=self._device)
            logits = self._model(input_ids).logits[0, -1]
        return logits.double().softmax(dim=-1).tolist()


def build_adapter(config: ServerConfig) -> ModelAdapter:
    if config.model == TINY_CHAR_MODEL:
        return CharCausalLM(config)
    return HubCausalLM(config)
