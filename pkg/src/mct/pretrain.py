"""Center-mask pretraining.

The embedding of the patch's center pixel is overwritten by a learnable mask
vector; the sequence runs through the encoder and a two-block decoder, and the
decoded center token is mapped back to a spectrum that is scored against the
true (normalised) center spectrum with MSE.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .mce import TokenSequence
from .model import ENCODER_PREFIXES, MCT
from .nn import EVAL, MLP3, Context, Module, _param
from .optim import Adam
from .tensor import Tape, Tensor, no_grad, replace_row
from .transformer import Encoder, EncoderConfig

log = logging.getLogger(__name__)

DECODER_DEPTH = 2
MASK_INIT_STD = 0.02
# dropout sites of the decoder never collide with encoder sites
DECODER_SITE_OFFSET = 1000


class TransferError(KeyError):
    pass


class CMPP(Module):
    """Mask vector, two-block decoder and spectrum reconstruction head."""

    def __init__(self, d_model: int, bands: int, heads: int, rng: np.random.Generator,
                 d_ff: int | None = None, dropout: float = 0.0, d_hidden: int | None = None):
        super().__init__()
        self.mask_vector = _param(rng, (d_model,), std=MASK_INIT_STD)
        dec_cfg = EncoderConfig(d_model=d_model, depth=DECODER_DEPTH, heads=heads, d_ff=d_ff, dropout=dropout)
        self.decoder = Encoder(dec_cfg, rng, site_offset=DECODER_SITE_OFFSET)
        self.recon_head = MLP3(d_model, d_hidden or d_model, bands, rng)
        self.assign_names("cmpp.")

    @classmethod
    def for_model(cls, model: MCT, seed: int = 0, d_hidden: int | None = None) -> "CMPP":
        enc = model.cfg.encoder
        return cls(enc.d_model, model.cfg.mce.bands, enc.heads, np.random.default_rng([seed, 2]),
                   d_ff=enc.d_ff, dropout=enc.dropout, d_hidden=d_hidden)

    def named_parameters(self, prefix: str = ""):
        return super().named_parameters(prefix or "cmpp.")


def mask_center(tokens: TokenSequence, mask_vector: Tensor) -> TokenSequence:
    """Overwrite the center token with ``mask_vector``; order and length are preserved."""
    return TokenSequence(replace_row(tokens.tokens, tokens.center_index, mask_vector), tokens.grid)


def reconstruct(masked: TokenSequence, cmpp: CMPP, ctx: Context = EVAL) -> Tensor:
    """Decode the full sequence and map the decoded center token to a spectrum."""
    decoded = cmpp.decoder(masked.tokens, ctx)
    center = decoded[..., masked.center_index, :]
    return cmpp.recon_head(center)


def center_spectra(patches: np.ndarray) -> np.ndarray:
    c = patches.shape[-2] // 2
    return patches[..., c, c, :]


def pretrain_forward(patches, model: MCT, cmpp: CMPP, ctx: Context = EVAL,
                     zero_center: bool = False) -> Tensor:
    """Reconstructed center spectra, N x B.

    ``zero_center`` blanks the raw center pixel before embedding, which closes
    the path by which the convolution branch leaks the target into neighbour
    tokens.
    """
    x = np.asarray(patches)
    if zero_center:
        x = x.copy()
        c = x.shape[-2] // 2
        x[..., c, c, :] = 0.0
    seq = model.mce(x, ctx)
    masked = mask_center(seq, cmpp.mask_vector)
    encoded = TokenSequence(model.encoder(masked, ctx), seq.grid)
    return reconstruct(encoded, cmpp, ctx)


def reconstruction_loss(patches, model: MCT, cmpp: CMPP, ctx: Context = EVAL,
                        zero_center: bool = False) -> Tensor:
    target = center_spectra(np.asarray(patches))
    pred = pretrain_forward(patches, model, cmpp, ctx, zero_center)
    return F.mse(pred, target.astype(pred.dtype))


def pretrain_params(model: MCT, cmpp: CMPP) -> list:
    """Encoder-side parameters plus everything in ``cmpp``; the classifier head is excluded."""
    enc = [p for name, p in model.named_parameters() if name.startswith(ENCODER_PREFIXES)]
    return enc + cmpp.parameters()


def pretrain_step(patches, model: MCT, cmpp: CMPP, opt: Adam, ctx: Context | None = None,
                  lr: float | None = None, zero_center: bool = False) -> float:
    """One joint Adam step on encoder + pretraining head; returns the pre-step loss."""
    ctx = ctx or Context(training=True)
    opt.zero_grad()
    with Tape() as tape:
        loss = reconstruction_loss(patches, model, cmpp, ctx, zero_center)
    tape.backward(loss)
    opt.step(lr)
    return loss.item()


def center_leakage(patches, model: MCT, cmpp: CMPP, scale: float = 1.0, seed: int = 0) -> float:
    """Relative change of the reconstruction when only the raw center spectrum is perturbed.

    Zero would mean the token-level mask fully hides the target; the
    convolution receptive fields make it positive in general.
    """
    x = np.array(patches, dtype=np.float64)
    c = x.shape[-2] // 2
    pert = x.copy()
    pert[..., c, c, :] += np.random.default_rng(seed).normal(0.0, scale, size=pert[..., c, c, :].shape)
    with no_grad():
        base = pretrain_forward(x, model, cmpp).data
        moved = pretrain_forward(pert, model, cmpp).data
    return float(np.linalg.norm(moved - base) / max(np.linalg.norm(base), 1e-12))


@dataclass
class TransferReport:
    copied: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    fresh: list[str] = field(default_factory=list)


def transfer_weights(checkpoint: dict[str, np.ndarray], target: MCT, scope: str = "full",
                     head_seed: int | None = None) -> TransferReport:
    """Initialise ``target``'s embedding and encoder from pretrained arrays.

    ``full`` requires every encoder-side entry of ``target`` to be present;
    ``partial`` copies the names both sides share. The classifier head is
    always re-initialised; pretraining-only entries are never copied.
    """
    if scope not in ("full", "partial"):
        raise ValueError(f"unknown transfer scope {scope!r}")
    wanted = target.encoder_state()
    source = {k: v for k, v in checkpoint.items() if k.startswith(ENCODER_PREFIXES)}
    missing = sorted(set(wanted) - set(source))
    if scope == "full" and missing:
        raise TransferError(f"full transfer: checkpoint lacks {missing}")
    for name in sorted(set(wanted) & set(source)):
        if np.shape(source[name]) != np.shape(wanted[name]):
            raise TransferError(f"shape mismatch for {name}: {np.shape(source[name])} vs {np.shape(wanted[name])}")
    shared = {k: source[k] for k in wanted if k in source}
    target.load_state_dict(shared, strict=False)
    report = TransferReport(
        copied=sorted(shared),
        skipped=sorted(set(source) - set(wanted)) + missing,
    )
    seed = head_seed if head_seed is not None else 0
    target.init_head(np.random.default_rng([seed, 3]))
    report.fresh = [name for name, _ in target.head.named_parameters("head.")]
    if report.skipped:
        log.info("transfer (%s) skipped %d entries: %s", scope, len(report.skipped), report.skipped)
    return report
