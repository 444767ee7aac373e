"""GPT-2-architecture checkpoint export into the PCDW container.

Only the GPT-2 family is supported: pre-norm blocks, learned absolute
positions, LayerNorm with eps 1e-5, and the tanh-form GELU. Anything else
(rotary positions, RMSNorm, gated MLPs) is refused outright rather than
approximated, naming the mismatched component.

The writer emits the PCDW layout expected by the engine: magic ``PCDW``,
u32 version 1, u64 JSON-header length, a header with the config and the
per-tensor shape/offset table, then contiguous little-endian float32 data.
Projection matrices are stored ``[in, out]`` row-major; GPT-2's Conv1D
weights already use that layout, so only the language-model head transposes.
"""

from __future__ import annotations

import json
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PCDW_MAGIC = b"PCDW"
PCDW_VERSION = 1

SUPPORTED_MODEL_TYPE = "gpt2"
SUPPORTED_ACTIVATIONS = ("gelu_new", "gelu_pytorch_tanh")
REQUIRED_LAYER_NORM_EPS = 1e-5

TOKENIZER_FILES = ("vocab.json", "merges.txt")


class UnsupportedArchitecture(ValueError):
    """The source checkpoint is not a plain GPT-2 stack."""


@dataclass
class ExportManifest:
    """What was exported, from where, and how each tensor was produced."""

    source: str
    config: dict
    tensor_map: dict[str, dict] = field(default_factory=dict)
    files: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "config": self.config,
            "tensor_map": self.tensor_map,
            "files": self.files,
        }

    def write(self, path: Path) -> None:
        path.write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )


def _check_architecture(config) -> None:
    model_type = getattr(config, "model_type", None)
    if model_type != SUPPORTED_MODEL_TYPE:
        detail = "unknown"
        if model_type in ("llama", "mistral", "qwen2", "gemma"):
            detail = "rotary position embeddings / RMSNorm"
        raise UnsupportedArchitecture(
            f"model_type {model_type!r} is not supported ({detail}); "
            f"only {SUPPORTED_MODEL_TYPE!r} checkpoints export"
        )
    activation = getattr(config, "activation_function", None)
    if activation not in SUPPORTED_ACTIVATIONS:
        raise UnsupportedArchitecture(
            f"activation_function {activation!r} is not the tanh-form GELU "
            f"the engine computes; expected one of {SUPPORTED_ACTIVATIONS}"
        )
    eps = getattr(config, "layer_norm_epsilon", None)
    if abs(eps - REQUIRED_LAYER_NORM_EPS) > 1e-12:
        raise UnsupportedArchitecture(
            f"layer_norm_epsilon {eps} differs from the engine's fixed "
            f"{REQUIRED_LAYER_NORM_EPS}"
        )
    for flag in ("scale_attn_by_inverse_layer_idx", "reorder_and_upcast_attn"):
        if getattr(config, flag, False):
            raise UnsupportedArchitecture(f"attention variant {flag} is not supported")


def _engine_config(config) -> dict:
    d_ff = config.n_inner if config.n_inner is not None else 4 * config.n_embd
    return {
        "n_layers": config.n_layer,
        "d_model": config.n_embd,
        "n_heads": config.n_head,
        "d_ff": d_ff,
        "vocab_size": config.vocab_size,
        "max_seq": config.n_positions,
        "tie_unembedding": bool(getattr(config, "tie_word_embeddings", True)),
    }


def _collect_tensors(model, config) -> tuple[dict[str, np.ndarray], dict[str, dict]]:
    state = {k: v.detach().to("cpu") for k, v in model.state_dict().items()}

    def grab(name: str) -> np.ndarray:
        if name not in state:
            raise UnsupportedArchitecture(f"missing source tensor {name!r}")
        return state[name].to(dtype=None).float().numpy()

    d = config.n_embd
    tensors: dict[str, np.ndarray] = {}
    mapping: dict[str, dict] = {}

    def put(name: str, array: np.ndarray, source: str, transform: str) -> None:
        tensors[name] = np.ascontiguousarray(array, dtype=np.float32)
        mapping[name] = {"source": source, "transform": transform}

    put("tok_emb", grab("transformer.wte.weight"), "transformer.wte.weight", "copy")
    put("pos_emb", grab("transformer.wpe.weight"), "transformer.wpe.weight", "copy")
    for i in range(config.n_layer):
        h = f"transformer.h.{i}"
        put(f"layers.{i}.ln1.g", grab(f"{h}.ln_1.weight"), f"{h}.ln_1.weight", "copy")
        put(f"layers.{i}.ln1.b", grab(f"{h}.ln_1.bias"), f"{h}.ln_1.bias", "copy")
        qkv_w = grab(f"{h}.attn.c_attn.weight")  # Conv1D: [in, 3*out]
        qkv_b = grab(f"{h}.attn.c_attn.bias")
        for j, which in enumerate("qkv"):
            put(
                f"layers.{i}.attn.w{which}",
                qkv_w[:, j * d : (j + 1) * d],
                f"{h}.attn.c_attn.weight",
                f"split-{which}",
            )
            put(
                f"layers.{i}.attn.b{which}",
                qkv_b[j * d : (j + 1) * d],
                f"{h}.attn.c_attn.bias",
                f"split-{which}",
            )
        put(f"layers.{i}.attn.wo", grab(f"{h}.attn.c_proj.weight"),
            f"{h}.attn.c_proj.weight", "copy")
        put(f"layers.{i}.attn.bo", grab(f"{h}.attn.c_proj.bias"),
            f"{h}.attn.c_proj.bias", "copy")
        put(f"layers.{i}.ln2.g", grab(f"{h}.ln_2.weight"), f"{h}.ln_2.weight", "copy")
        put(f"layers.{i}.ln2.b", grab(f"{h}.ln_2.bias"), f"{h}.ln_2.bias", "copy")
        put(f"layers.{i}.mlp.w_in", grab(f"{h}.mlp.c_fc.weight"),
            f"{h}.mlp.c_fc.weight", "copy")
        put(f"layers.{i}.mlp.b_in", grab(f"{h}.mlp.c_fc.bias"),
            f"{h}.mlp.c_fc.bias", "copy")
        put(f"layers.{i}.mlp.w_out", grab(f"{h}.mlp.c_proj.weight"),
            f"{h}.mlp.c_proj.weight", "copy")
        put(f"layers.{i}.mlp.b_out", grab(f"{h}.mlp.c_proj.bias"),
            f"{h}.mlp.c_proj.bias", "copy")
    put("final_ln.g", grab("transformer.ln_f.weight"), "transformer.ln_f.weight", "copy")
    put("final_ln.b", grab("transformer.ln_f.bias"), "transformer.ln_f.bias", "copy")
    # lm_head is nn.Linear ([out, in]); the engine wants [in, out]
    head = "lm_head.weight" if "lm_head.weight" in state else "transformer.wte.weight"
    put("unemb", grab(head).T, head, "transpose")
    return tensors, mapping


def write_pcdw(path: Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Serialize the container; byte output is deterministic for fixed inputs."""
    order = list(tensors)
    entries: dict[str, dict] = {}
    offset = 0
    for name in order:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
    header = json.dumps(
        {"config": config, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PCDW_MAGIC)
        f.write(struct.pack("<I", PCDW_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in order:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())


def export(source_ref: str | Path, out_dir: str | Path) -> ExportManifest:
    """Export a GPT-2-architecture checkpoint directory to PCDW + tokenizer files.

    Writes ``model.pcdw``, ``vocab.json``, ``merges.txt`` and
    ``manifest.json`` into ``out_dir`` and returns the manifest. Re-running on
    the same source produces byte-identical outputs.
    """
    from transformers import AutoConfig, GPT2LMHeadModel

    source = Path(source_ref)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    config = AutoConfig.from_pretrained(source)
    _check_architecture(config)
    model = GPT2LMHeadModel.from_pretrained(source).eval()

    engine_config = _engine_config(config)
    tensors, mapping = _collect_tensors(model, config)
    write_pcdw(out / "model.pcdw", engine_config, tensors)

    files = ["model.pcdw"]
    for name in TOKENIZER_FILES:
        src_file = source / name
        if not src_file.exists():
            raise FileNotFoundError(
                f"tokenizer file {name!r} not found next to the checkpoint "
                f"({src_file}); export requires vocab.json and merges.txt"
            )
        shutil.copyfile(src_file, out / name)
        files.append(name)

    manifest = ExportManifest(
        source=str(source_ref),
        config=engine_config,
        tensor_map=mapping,
        files=files + ["manifest.json"],
    )
    manifest.write(out / "manifest.json")
    return manifest
