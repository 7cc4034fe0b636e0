"""refserver: HTTP adapter serving next-token distributions from a causal
language model over the logits wire protocol."""

from .adapters import CharCausalLM, HubCausalLM, ModelAdapter, ServerConfig, build_adapter
from .app import create_app, create_unavailable_app

__version__ = "0.1.0"
