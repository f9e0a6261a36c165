"""Decoder backbone with byte-level vocabulary, image prefix adapter,
generation, and checkpoint persistence.

Images (and videos, as frame stacks) enter as patch embeddings prepended to
the token sequence between <img> ... </img> marker embeddings; the decoder
itself is text-only on the output side. Audio is rejected explicitly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (ConfigError, ContextLengthError, ManifestError, ModalityError,
                     ShapeError)
from .tensor import Tensor, concat, embedding, matmul, no_grad
from .tokenizer import SPECIALS, N_BYTES, Vocabulary


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_groups: int = 2
    d_ff: int | None = None          # None -> 8/3 * d_model rounded up to /8
    max_context: int = 512
    rope_base: float = 10000.0
    n_sentinels: int = 100
    vocab_size: int | None = None    # None -> 256 bytes + specials + sentinels
    patch_size: int = 4
    image_channels: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = layers.default_ffn_dim(self.d_model)
        base_vocab = N_BYTES + len(SPECIALS) + self.n_sentinels
        if self.vocab_size is None:
            self.vocab_size = base_vocab
        for name in ("d_model", "n_layers", "n_heads", "n_groups", "d_ff",
                     "vocab_size", "max_context", "patch_size", "image_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_groups != 0:
            raise ConfigError(f"n_heads {self.n_heads} not divisible by n_groups {self.n_groups}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError(f"head dim {self.d_model // self.n_heads} must be even for rotary embeddings")
        if self.vocab_size < base_vocab:
            raise ConfigError(
                f"vocab_size {self.vocab_size} < {base_vocab} needed for bytes + specials + sentinels")
        if self.rope_base <= 0:
            raise ConfigError(f"rope_base must be positive, got {self.rope_base}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def param_count(self) -> int:
        per_block = (2 * self.d_model
                     + layers.gqa_param_count(self.d_model, self.n_heads, self.n_groups)
                     + 3 * self.d_model * self.d_ff)
        adapter = self.patch_size ** 2 * self.image_channels * self.d_model
        return (self.vocab_size * self.d_model          # token embedding
                + self.n_layers * per_block
                + self.d_model                           # final norm gain
                + self.d_model * self.vocab_size         # output projection
                + adapter)


@dataclass
class ImageAdapter:
    patch_size: int
    w_proj: Tensor  # (patch_size^2 * channels, d_model)


class DeskLM:
    """A loaded model is immutable under forward/generate; training mutates
    parameter buffers in place (single owner)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.vocab = Vocabulary(config.n_sentinels)
        self.rope = layers.RopeConfig(head_dim=config.head_dim, base=config.rope_base)
        np_dtype = np.float32 if config.dtype == "float32" else np.float64
        self._np_dtype = np_dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD35C]))

        def normal(shape, std=0.02):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=np_dtype)

        self.tok_emb = normal((config.vocab_size, config.d_model))
        self.blocks = [
            layers.init_block(config.d_model, config.n_heads, config.n_groups,
                              config.d_ff, config.n_layers, rng, np_dtype)
            for _ in range(config.n_layers)
        ]
        self.final_norm = layers.init_rmsnorm(config.d_model, np_dtype)
        self.w_out = normal((config.d_model, config.vocab_size))
        self.adapter = ImageAdapter(
            patch_size=config.patch_size,
            w_proj=normal((config.patch_size ** 2 * config.image_channels, config.d_model)))

    # -- parameters ------------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"tok_emb": self.tok_emb}
        for i, b in enumerate(self.blocks):
            params[f"blocks.{i}.attn_norm.g"] = b.attn_norm.g
            params[f"blocks.{i}.attn.w_q"] = b.attn.w_q
            params[f"blocks.{i}.attn.w_k"] = b.attn.w_k
            params[f"blocks.{i}.attn.w_v"] = b.attn.w_v
            params[f"blocks.{i}.attn.w_o"] = b.attn.w_o
            params[f"blocks.{i}.ffn_norm.g"] = b.ffn_norm.g
            params[f"blocks.{i}.ffn.w_gate"] = b.ffn.w_gate
            params[f"blocks.{i}.ffn.w_up"] = b.ffn.w_up
            params[f"blocks.{i}.ffn.w_down"] = b.ffn.w_down
        params["final_norm.g"] = self.final_norm.g
        params["w_out"] = self.w_out
        params["adapter.w_proj"] = self.adapter.w_proj
        return params

    def param_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def zero_grads(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    # -- forward ----------------------------------------------------------------

    def embed(self, token_ids) -> Tensor:
        return embedding(self.tok_emb, np.asarray(token_ids, dtype=np.int64))

    def forward_embedded(self, emb: Tensor, positions: np.ndarray | None = None) -> Tensor:
        """Run the backbone over an already-embedded sequence (..., seq, d_model)."""
        seq = emb.shape[-2]
        if seq > self.config.max_context:
            raise ContextLengthError(
                f"sequence of {seq} tokens exceeds max_context {self.config.max_context}")
        if positions is None:
            positions = np.arange(seq)
        h = emb
        for b in self.blocks:
            h = layers.transformer_block(h, b, self.rope, causal=True, positions=positions)
        return matmul(layers.rmsnorm(h, self.final_norm), self.w_out)

    def forward_tokens(self, token_batch) -> Tensor:
        """Text-only batched forward: (batch, seq) ids to (batch, seq, vocab) logits."""
        ids = np.asarray(token_batch, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"forward_tokens: expected (batch, seq) ids, got shape {ids.shape}")
        return self.forward_embedded(self.embed(ids))

    def image_to_prefix(self, image: np.ndarray) -> Tensor:
        """Non-overlapping patches, flattened row-major and projected to d_model.

        Accepts (h, w, c) or (frames, h, w, c); frames concatenate in time order.
        """
        image = np.asarray(image, dtype=self._np_dtype)
        if image.ndim == 3:
            image = image[None]
        if image.ndim != 4:
            raise ShapeError(f"image must be (h, w, c) or (frames, h, w, c), got {image.shape}")
        f, h, w, c = image.shape
        p = self.adapter.patch_size
        if c != self.config.image_channels:
            raise ShapeError(f"image has {c} channels, adapter expects {self.config.image_channels}")
        if h % p != 0 or w % p != 0:
            raise ShapeError(f"image dims {h}x{w} not divisible by patch size {p}")
        patches = (image.reshape(f, h // p, p, w // p, p, c)
                   .transpose(0, 1, 3, 2, 4, 5)
                   .reshape(f * (h // p) * (w // p), p * p * c))
        return matmul(Tensor(patches, dtype=self._np_dtype), self.adapter.w_proj)

    def prefix_length(self, image: np.ndarray | None) -> int:
        """Tokens the image prefix occupies, marker tokens included."""
        if image is None:
            return 0
        image = np.asarray(image)
        f = 1 if image.ndim == 3 else image.shape[0]
        p = self.adapter.patch_size
        return f * (image.shape[-3] // p) * (image.shape[-2] // p) + 2

    def forward(self, tokens, image: np.ndarray | None = None,
                audio=None) -> Tensor:
        """Next-token logits for one sequence: (prefix + seq, vocab_size)."""
        if audio is not None:
            raise ModalityError("audio input is not supported by this model")
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeError(f"forward: expected a 1-D token sequence, got shape {ids.shape}")
        total = len(ids) + self.prefix_length(image)
        if total > self.config.max_context:
            raise ContextLengthError(
                f"prefix + tokens = {total} exceeds max_context {self.config.max_context}")
        if image is None:
            return self.forward_embedded(self.embed(ids))
        prefix = self.image_to_prefix(image)
        emb = concat([self.embed([self.vocab.img_start]),
                      prefix,
                      self.embed([self.vocab.img_end]),
                      self.embed(ids)], axis=0)
        return self.forward_embedded(emb)

    # -- generation ----------------------------------------------------------------

    def generate(self, prompt_tokens, max_new: int, image: np.ndarray | None = None,
                 mode: str = "greedy", temperature: float = 1.0, seed: int = 0,
                 use_cache: bool = True) -> list[int]:
        """Generate up to max_new ids, stopping after EOS.

        greedy takes the argmax each step (ties to the lowest id); temperature
        mode samples from softmax(logits / temperature) with a seeded RNG.
        """
        if max_new < 1:
            raise ConfigError(f"max_new must be >= 1, got {max_new}")
        if mode not in ("greedy", "temperature"):
            raise ConfigError(f"unknown generation mode {mode!r}")
        if mode == "temperature" and temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E0]))

        with no_grad():
            if use_cache:
                return self._generate_cached(prompt_tokens, max_new, image, mode,
                                             temperature, rng)
            ids = list(int(i) for i in prompt_tokens)
            out: list[int] = []
            for _ in range(max_new):
                logits = self.forward(ids, image=image)
                nxt = self._pick(logits.data[-1], mode, temperature, rng)
                out.append(nxt)
                ids.append(nxt)
                if nxt == self.vocab.eos:
                    break
            return out

    def _pick(self, row: np.ndarray, mode: str, temperature: float,
              rng: np.random.Generator) -> int:
        if mode == "greedy":
            return int(np.argmax(row))
        z = row.astype(np.float64) / temperature
        z -= z.max()
        p = np.exp(z)
        p /= p.sum()
        return int(rng.choice(len(p), p=p))

    def _generate_cached(self, prompt_tokens, max_new, image, mode, temperature, rng):
        """Append-only KV cache: prefill once, then one block pass per new token."""
        ids = [int(i) for i in prompt_tokens]
        if image is None:
            emb = self.embed(ids)
        else:
            emb = concat([self.embed([self.vocab.img_start]),
                          self.image_to_prefix(image),
                          self.embed([self.vocab.img_end]),
                          self.embed(ids)], axis=0)
        seq = emb.shape[0]
        if seq > self.config.max_context:
            raise ContextLengthError(
                f"prefix + tokens = {seq} exceeds max_context {self.config.max_context}")

        caches: list[dict[str, np.ndarray]] = []
        positions = np.arange(seq)
        h = emb
        for b in self.blocks:
            a = layers.rmsnorm(h, b.attn_norm)
            q, k, v = layers.gqa_project(a, b.attn, self.rope, positions)
            caches.append({"k": k.data.copy(), "v": v.data.copy()})
            h = h + layers.gqa_core(q, k, v, b.attn, causal=True)
            h = h + layers.swiglu_ffn(layers.rmsnorm(h, b.ffn_norm), b.ffn)
        logits_row = matmul(layers.rmsnorm(h[-1:, :], self.final_norm), self.w_out).data[0]

        out: list[int] = []
        pos = seq
        for _ in range(max_new):
            nxt = self._pick(logits_row, mode, temperature, rng)
            out.append(nxt)
            if nxt == self.vocab.eos:
                break
            if pos + 1 > self.config.max_context:
                raise ContextLengthError(
                    f"generation reached max_context {self.config.max_context}")
            h = self.embed([nxt])
            for b, cache in zip(self.blocks, caches):
                a = layers.rmsnorm(h, b.attn_norm)
                q, k, v = layers.gqa_project(a, b.attn, self.rope, np.array([pos]))
                cache["k"] = np.concatenate([cache["k"], k.data], axis=0)
                cache["v"] = np.concatenate([cache["v"], v.data], axis=0)
                k_all = Tensor(cache["k"], dtype=self._np_dtype)
                v_all = Tensor(cache["v"], dtype=self._np_dtype)
                h = h + layers.gqa_core(q, k_all, v_all, b.attn, causal=True,
                                        query_offset=pos)
                h = h + layers.swiglu_ffn(layers.rmsnorm(h, b.ffn_norm), b.ffn)
            logits_row = matmul(layers.rmsnorm(h, self.final_norm), self.w_out).data[0]
            pos += 1
        return out

    # -- persistence ------------------------------------------------------------------

    def save(self, path, extra_tensors: dict | None = None, extra: dict | None = None) -> None:
        tensors: dict = dict(self.named_parameters())
        if extra_tensors:
            for name, t in extra_tensors.items():
                if name in tensors:
                    raise ManifestError(f"extra tensor name collides with parameter {name!r}")
                tensors[name] = t
        save_checkpoint(path, {"model": self.config.to_dict()}, tensors, extra=extra)

    @classmethod
    def load(cls, path) -> tuple["DeskLM", Checkpoint]:
        ckpt = load_checkpoint(path)
        if "model" not in ckpt.config:
            raise ManifestError(f"{path}: manifest lacks a model config")
        model = cls(ModelConfig.from_dict(ckpt.config["model"]), seed=0)
        for name, param in model.named_parameters().items():
            if name not in ckpt.tensors:
                raise ManifestError(f"{path}: tensor {name!r} missing from checkpoint")
            stored = ckpt.tensors[name]
            if tuple(stored.shape) != param.shape:
                raise ManifestError(
                    f"{path}: tensor {name!r} has shape {stored.shape}, expected {param.shape}")
            param.data = stored.astype(model._np_dtype)
        return model, ckpt


def export_logits_csv(model: DeskLM, token_seqs, path) -> None:
    """Probe-batch logits as CSV: seq,pos plus one full-precision column per vocab id."""
    with no_grad(), open(path, "w", encoding="utf-8") as f:
        f.write("seq,pos," + ",".join(f"logit_{i}" for i in range(model.config.vocab_size)) + "\n")
        for s, toks in enumerate(token_seqs):
            logits = model.forward(toks).data
            for pos in range(logits.shape[0]):
                row = ",".join(repr(float(x)) for x in logits[pos])
                f.write(f"{s},{pos},{row}\n")
