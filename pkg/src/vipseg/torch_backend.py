"""Checkpoint-backed encoder over pre-norm ViT modules (torch).

The wrapped modules follow the common ViT layout: a backbone exposing
``prepare_tokens_with_masks`` (or ``patch_embed``), ``blocks`` and ``norm``;
adapter blocks with ``norm1``, ``attn.qkv``, ``attn.proj``, ``attn.num_heads``,
optional ``ls1``/``ls2``, ``norm2`` and ``mlp``. Prefix tokens ([CLS] and
registers) stay internal: attention maps are restricted to the patch block and
renormalised, and injected attention never routes patch rows to a prefix token.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .backend import AttentionStack, EncoderBackend, PatchGrid, Source
from .errors import BackendFaultError, ConfigurationError, InputContractError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _torch():
    try:
        import torch
    except ImportError as exc:  # pragma: no cover - torch is an optional extra
        raise ConfigurationError("the checkpoint backend needs torch installed") from exc
    return torch


def _block_attention(block, x):
    """Head-averaged attention probabilities and the attention branch output."""
    torch = _torch()
    attn = block.attn
    b, n, d = x.shape
    h = attn.num_heads
    qkv = attn.qkv(x).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = getattr(attn, "scale", (d // h) ** -0.5)
    probs = torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1)
    return probs, v


def _attend(block, x, probs_override=None):
    torch = _torch()
    probs, v = _block_attention(block, x)
    if probs_override is not None:
        probs = probs_override[:, None].expand_as(probs)
    b, h, n, hd = v.shape
    out = (probs @ v).transpose(1, 2).reshape(b, n, h * hd)
    out = block.attn.proj(out)
    return out, probs


def _run_block(block, x, probs_override=None):
    ls1 = getattr(block, "ls1", None) or (lambda t: t)
    ls2 = getattr(block, "ls2", None) or (lambda t: t)
    out, probs = _attend(block, block.norm1(x), probs_override)
    x = x + ls1(out)
    x = x + ls2(block.mlp(block.norm2(x)))
    return x, probs


def _patch_block(probs, prefix):
    """Patch-to-patch attention, rows renormalised after dropping prefix columns."""
    p = probs[..., prefix:, prefix:]
    return p / p.sum(dim=-1, keepdim=True)


class TorchViTBackend(EncoderBackend):
    name = "checkpoint"

    def __init__(
        self,
        backbone,
        adapter_blocks: Sequence,
        text_encoder: Callable,
        tokenizer: Callable,
        patch_size: int,
        num_prefix_tokens: int = 1,
        logit_scale: float = 100.0,
        mean=IMAGENET_MEAN,
        std=IMAGENET_STD,
        pixel_range: float = 255.0,
        text_slice: Optional[tuple] = None,
        device: str = "cpu",
    ):
        torch = _torch()
        self.torch = torch
        self.backbone = backbone.eval()
        self.blocks = list(adapter_blocks)
        for b in self.blocks:
            b.eval()
        self.text_encoder = text_encoder
        self.tokenizer = tokenizer
        self.patch_size = int(patch_size)
        self.prefix = int(num_prefix_tokens)
        self.num_layers = len(backbone.blocks)
        self.logit_scale = float(logit_scale)
        self.mean = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
        self.std = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
        self.pixel_range = pixel_range
        self.text_slice = text_slice
        self.device = device
        self.dim = int(backbone.embed_dim)

    @property
    def adapter_blocks(self) -> int:
        return len(self.blocks)

    def _tokens(self, x):
        bb = self.backbone
        if hasattr(bb, "prepare_tokens_with_masks"):
            out = bb.prepare_tokens_with_masks(x)
            return out[0] if isinstance(out, tuple) else out
        return bb.prepare_tokens(x)

    def encode_backbone(self, image, image_id=""):
        torch = self.torch
        image = self.check_image(image)
        gh, gw = image.shape[0] // self.patch_size, image.shape[1] // self.patch_size
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
        x = (x / self.pixel_range - self.mean) / self.std
        layers = []
        with torch.inference_mode():
            t = self._tokens(x.to(self.device))
            for block in self.backbone.blocks:
                t, probs = _run_block(block, t)
                layers.append(_patch_block(probs.mean(dim=1), self.prefix)[0].double().cpu().numpy())
            t = self.backbone.norm(t)
        tokens = t[0, self.prefix :].float().cpu().numpy()
        if not np.isfinite(tokens).all() or not all(np.isfinite(a).all() for a in layers):
            raise BackendFaultError(f"non-finite backbone activations for {image_id!r}")
        if tokens.shape[0] != gh * gw:
            raise BackendFaultError(f"backbone returned {tokens.shape[0]} patches for a {gh}x{gw} grid")
        return PatchGrid(tokens, gh, gw, Source.BACKBONE, image_id), AttentionStack(layers)

    def adapter_forward(self, v, injected_attention=None):
        torch = self.torch
        mats = self.normalize_injection(v, injected_attention)
        x = torch.from_numpy(v.tokens)[None]
        # the backbone's own prefix tokens are not carried by PatchGrid; pooled patches stand in
        prefix = x.mean(dim=1, keepdim=True).expand(1, self.prefix, -1) if self.prefix else x[:, :0]
        x = torch.cat([prefix, x], dim=1)
        n = x.shape[1]
        with torch.inference_mode():
            for b, block in enumerate(self.blocks):
                override = None
                if mats is not None:
                    native, _ = _block_attention(block, block.norm1(x))
                    full = native.mean(dim=1).clone()
                    full[:, self.prefix :, :] = 0.0
                    full[:, self.prefix :, self.prefix :] = torch.from_numpy(mats[b]).to(full.dtype)
                    override = full
                x, _ = _run_block(block, x, override)
        out = x[0, self.prefix :].float().cpu().numpy()
        if out.shape[0] != n - self.prefix or not np.isfinite(out).all():
            raise BackendFaultError("adapter produced unusable tokens")
        return PatchGrid(out, v.grid_h, v.grid_w, Source.ADAPTER, v.image_id)

    def encode_text(self, prompts):
        torch = self.torch
        prompts = list(prompts)
        if not prompts:
            raise InputContractError("no prompts given")
        if any(not isinstance(p, str) or not p.strip() for p in prompts):
            raise InputContractError("empty prompt string")
        with torch.inference_mode():
            emb = self.text_encoder(self.tokenizer(prompts)).float()
        if self.text_slice is not None:
            emb = emb[:, self.text_slice[0] : self.text_slice[1]]
        emb = emb.double().cpu().numpy()
        return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def load_checkpoint_backend(cfg: dict) -> TorchViTBackend:
    """Build a backend from a ``torch.hub`` checkout and local weights.

    ``cfg`` keys: ``hub_repo`` (local directory), ``model`` (hub entry point),
    ``weights`` / ``backbone_weights`` (forwarded to the entry point),
    ``patch_size``, and dotted attribute paths ``backbone_attr``,
    ``adapter_attr``, ``text_attr``, ``tokenizer`` (hub entry point returning a
    tokenizer), plus optional ``text_slice`` and ``num_prefix_tokens``.
    """
    torch = _torch()
    try:
        kwargs = {k: cfg[k] for k in ("weights", "backbone_weights") if k in cfg}
        model = torch.hub.load(cfg["hub_repo"], cfg["model"], source="local", **kwargs)
        tok_entry = cfg.get("tokenizer")
        tokenizer_obj = torch.hub.load(cfg["hub_repo"], tok_entry, source="local") if tok_entry else None
    except KeyError as exc:
        raise ConfigurationError(f"checkpoint backend config is missing {exc}") from exc
    except Exception as exc:
        raise ConfigurationError(f"could not load checkpoint: {exc}") from exc
    model.eval()

    def resolve(path):
        obj = model
        for part in path.split("."):
            if not hasattr(obj, part):
                raise ConfigurationError(f"model has no attribute path {path!r}")
            obj = getattr(obj, part)
        return obj

    backbone = resolve(cfg.get("backbone_attr", "visual_model.backbone"))
    adapter = resolve(cfg.get("adapter_attr", "visual_model.head.blocks"))
    text_model = resolve(cfg.get("text_attr", "text_model"))
    if tokenizer_obj is None:
        raise ConfigurationError("checkpoint backend needs a 'tokenizer' hub entry point")
    tokenize = getattr(tokenizer_obj, "tokenize", tokenizer_obj)
    return TorchViTBackend(
        backbone,
        list(adapter),
        text_model,
        tokenize,
        patch_size=int(cfg.get("patch_size", 16)),
        num_prefix_tokens=int(cfg.get("num_prefix_tokens", 1 + getattr(backbone, "n_storage_tokens", 0))),
        logit_scale=float(cfg.get("logit_scale", 100.0)),
        text_slice=tuple(cfg["text_slice"]) if cfg.get("text_slice") else None,
        device=cfg.get("device", "cpu"),
    )


# a minimal reference model with the layout above, used by the test-suite ----


def tiny_vit(dim: int = 16, depth: int = 3, heads: int = 2, patch: int = 4, adapter_depth: int = 2, seed: int = 0):
    """Randomly initialised toy backbone, adapter blocks and text tower."""
    torch = _torch()
    nn = torch.nn
    torch.manual_seed(seed)

    class Attn(nn.Module):
        def __init__(self):
            super().__init__()
            self.num_heads = heads
            self.qkv = nn.Linear(dim, 3 * dim)
            self.proj = nn.Linear(dim, dim)

    class Block(nn.Module):
        def __init__(self):
            super().__init__()
            self.norm1 = nn.LayerNorm(dim)
            self.attn = Attn()
            self.norm2 = nn.LayerNorm(dim)
            self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    class Backbone(nn.Module):
        def __init__(self):
            super().__init__()
            self.embed_dim = dim
            self.patch_embed = nn.Conv2d(3, dim, patch, patch)
            self.cls_token = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
            self.blocks = nn.ModuleList([Block() for _ in range(depth)])
            self.norm = nn.LayerNorm(dim)

        def prepare_tokens(self, x):
            t = self.patch_embed(x).flatten(2).transpose(1, 2)
            return torch.cat([self.cls_token.expand(t.shape[0], -1, -1), t], dim=1)

    class Text(nn.Module):
        def __init__(self):
            super().__init__()
            self.emb = nn.EmbeddingBag(257, dim)

        def forward(self, tokens):
            return self.emb(tokens)

    def tokenizer(prompts):
        width = max(len(p.encode()) for p in prompts)
        ids = [list(p.encode()) + [256] * (width - len(p.encode())) for p in prompts]
        return torch.tensor(ids)

    backbone = Backbone()
    adapter = nn.ModuleList([Block() for _ in range(adapter_depth)])
    return backbone, adapter, Text(), tokenizer
