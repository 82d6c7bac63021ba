"""C2FNet: a Siamese coarse-to-fine change detection network.

Two co-registered RGB tiles are encoded by a shared VGG-style backbone into a
five-level feature pyramid each.  The pyramids are fused per level by absolute
difference, gated by channel and spatial attention, and decoded in two stages:
the three deepest levels produce a coarse change map (initial aggregation),
which then refines the shallow levels before a second context/aggregation pass
emits the full-resolution change logits.

All modules operate on float32 tensors shaped [N, C, H, W]; H and W must be
divisible by 16.  ``width_multiplier`` scales every encoder width so the same
wiring trains at desk scale; ``decoder_width`` is the common channel count of
the decoder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

ENCODER_CHANNELS = (64, 128, 256, 512, 512)
ENCODER_CONV_COUNTS = (2, 2, 3, 3, 3)
ENCODER_STRIDES = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class ModuleToggles:
    """Ablation switches; a disabled module is replaced by its bypass."""

    gcm_abc_enabled: bool = True
    gcm_cde_enabled: bool = True
    refine_enabled: bool = True
    agg_init_enabled: bool = True
    agg_final_enabled: bool = True

    @classmethod
    def all_off(cls) -> "ModuleToggles":
        return cls(False, False, False, False, False)

    def with_disabled(self, name: str) -> "ModuleToggles":
        """Return a copy with one ``*_enabled`` field switched off."""
        field_names = {f.name for f in fields(self)}
        if name not in field_names:
            raise ValueError(f"unknown toggle {name!r}")
        return replace(self, **{name: False})


def scaled_channels(width_multiplier: float) -> tuple[int, ...]:
    """Encoder widths under a multiplier, each at least 1 channel."""
    if width_multiplier <= 0:
        raise ConfigurationError(f"width_multiplier must be > 0, got {width_multiplier}")
    return tuple(max(1, int(round(c * width_multiplier))) for c in ENCODER_CHANNELS)


class BasicConv2d(nn.Module):
    """Conv + BatchNorm block (no activation)."""

    def __init__(self, in_ch, out_ch, kernel_size, padding=0, dilation=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, padding=padding,
                              dilation=dilation, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return self.bn(self.conv(x))


class EncoderBlock(nn.Module):
    """Repeated conv-BN-ReLU stack at one pyramid scale."""

    def __init__(self, in_ch, out_ch, n_convs):
        super().__init__()
        layers = []
        for i in range(n_convs):
            layers.append(nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, 3,
                                    padding=1, bias=False))
            layers.append(nn.BatchNorm2d(out_ch))
            layers.append(nn.ReLU(inplace=True))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class SiameseEncoder(nn.Module):
    """Five-block VGG-style backbone with a stride-2 max-pool between blocks.

    Returns the per-block feature maps, shallow to deep, at strides
    (1, 2, 4, 8, 16) and widths (64, 128, 256, 512, 512) x width_multiplier.
    """

    def __init__(self, width_multiplier: float = 1.0, in_ch: int = 3):
        super().__init__()
        chans = scaled_channels(width_multiplier)
        blocks = []
        prev = in_ch
        for ch, n in zip(chans, ENCODER_CONV_COUNTS):
            blocks.append(EncoderBlock(prev, ch, n))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2, 2)
        self.channels = chans

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            feats.append(x)
        return tuple(feats)


class ChannelAttention(nn.Module):
    """Gate channels by a squeeze-excite path over the global max response.

    Hidden width is channels/16 (the reduction ratio), clamped below at 4 so
    narrow desk-scale models keep a usable bottleneck.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc_down = nn.Conv2d(channels, hidden, 1)
        self.fc_up = nn.Conv2d(hidden, channels, 1)

    def gate(self, x):
        w = F.adaptive_max_pool2d(x, 1)
        w = self.fc_up(F.relu(self.fc_down(w)))
        return torch.sigmoid(w)

    def forward(self, x):
        return x * self.gate(x)


class SpatialAttention(nn.Module):
    """Gate locations by a 7x7 convolution over the channel-wise maximum."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(1, 1, kernel_size, padding=kernel_size // 2)

    def gate(self, x):
        m = x.max(dim=1, keepdim=True).values
        return torch.sigmoid(self.conv(m))

    def forward(self, x):
        return x * self.gate(x)


class GlobalContextModule(nn.Module):
    """Multi-branch dilated-convolution context block with a residual shortcut.

    Branch 0 is a 1x1 projection; branches 1-3 stack a 1x1 reduction, a
    factorized 1xk/kx1 pair and a 3x3 convolution dilated at 3, 5 and 7.  The
    concatenated branches are merged by a 3x3 convolution, added to a 1x1
    shortcut of the input, and passed through ReLU.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.branch0 = BasicConv2d(in_ch, out_ch, 1)
        branches = []
        for rate in (3, 5, 7):
            branches.append(nn.Sequential(
                BasicConv2d(in_ch, out_ch, 1),
                BasicConv2d(out_ch, out_ch, (1, rate), padding=(0, rate // 2)),
                BasicConv2d(out_ch, out_ch, (rate, 1), padding=(rate // 2, 0)),
                BasicConv2d(out_ch, out_ch, 3, padding=rate, dilation=rate),
            ))
        self.branch1, self.branch2, self.branch3 = branches
        self.conv_cat = BasicConv2d(4 * out_ch, out_ch, 3, padding=1)
        self.shortcut = BasicConv2d(in_ch, out_ch, 1)

    def forward(self, x):
        merged = self.conv_cat(torch.cat(
            (self.branch0(x), self.branch1(x), self.branch2(x), self.branch3(x)), dim=1))
        return F.relu(merged + self.shortcut(x))


def upsample(x, factor: int):
    """Bilinear upsampling, align_corners disabled."""
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


def refine_features(x1, x2, x3, attn):
    """Re-weight three decoder inputs by a shared single-channel attention map.

    ``x1``, ``x2``, ``x3`` sit at strides s, 2s and 4s; ``attn`` holds logits
    at stride 4s.  Each output is ``x + upsampled(sigmoid(attn)) * x`` with
    upsampling factors 4, 2 and 1, so attention near -inf leaves the inputs
    untouched.  Parameter-free.
    """
    if attn.shape[1] != 1:
        raise ValueError(f"attention map must be single-channel, got {attn.shape[1]}")
    ah, aw = attn.shape[-2:]
    expected = {(x1, 4), (x2, 2), (x3, 1)}
    for t, factor in expected:
        if t.shape[-2:] != (ah * factor, aw * factor):
            raise ValueError(
                f"stride ratio violation: input {tuple(t.shape[-2:])} vs attention "
                f"{(ah, aw)} at factor {factor}")
    a = torch.sigmoid(attn)
    y1 = x1 + upsample(a, 4) * x1
    y2 = x2 + upsample(a, 2) * x2
    y3 = x3 + a * x3
    return y1, y2, y3


class CascadeAggregation(nn.Module):
    """Cascaded partial decoder over three scales (strides 4s, 2s, s).

    Deep features are repeatedly upsampled, convolved and multiplied into the
    shallower ones, then concatenated stage by stage:

        h2 = conv(up2(deep)) * mid
        h3 = conv(up4(deep)) * conv(up2(mid)) * shallow
        g2 = conv_2c(cat(up2(deep), h2))
        g3 = conv_3c(cat(up2(conv_2c(g2)), h3))

    With ``emit_head`` the 3c-wide ``g3`` is reduced to one output channel by
    a further 3x3 block and a plain 3x3 convolution; otherwise ``g3`` itself
    is returned.
    """

    def __init__(self, channel: int, emit_head: bool):
        super().__init__()
        self.emit_head = emit_head
        self.conv_deep_mid = BasicConv2d(channel, channel, 3, padding=1)
        self.conv_deep_shallow = BasicConv2d(channel, channel, 3, padding=1)
        self.conv_mid_shallow = BasicConv2d(channel, channel, 3, padding=1)
        self.conv_stage2 = BasicConv2d(2 * channel, 2 * channel, 3, padding=1)
        self.conv_stage2_up = BasicConv2d(2 * channel, 2 * channel, 3, padding=1)
        self.conv_stage3 = BasicConv2d(3 * channel, 3 * channel, 3, padding=1)
        if emit_head:
            self.head_mix = BasicConv2d(3 * channel, 3 * channel, 3, padding=1)
            self.head_out = nn.Conv2d(3 * channel, 1, 3, padding=1)

    def forward(self, x_deep, x_mid, x_shallow):
        if not (x_deep.shape[1] == x_mid.shape[1] == x_shallow.shape[1]):
            raise ConfigurationError(
                "aggregation inputs must share the decoder width, got "
                f"{x_deep.shape[1]}/{x_mid.shape[1]}/{x_shallow.shape[1]}")
        up_deep = upsample(x_deep, 2)
        h2 = self.conv_deep_mid(up_deep) * x_mid
        h3 = (self.conv_deep_shallow(upsample(up_deep, 2))
              * self.conv_mid_shallow(upsample(x_mid, 2)) * x_shallow)
        g2 = self.conv_stage2(torch.cat((up_deep, h2), dim=1))
        g3 = self.conv_stage3(torch.cat((upsample(self.conv_stage2_up(g2), 2), h3), dim=1))
        if self.emit_head:
            return self.head_out(self.head_mix(g3))
        return g3


def _init_module(m: nn.Module) -> None:
    """Kaiming-uniform convolutions (ReLU gain, variance preserving), zero
    biases, batch-norm scale 1 / offset 0."""
    if isinstance(m, nn.Conv2d):
        nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.BatchNorm2d):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def fuse_pyramids(pyramid_t1, pyramid_t2):
    """Per-level absolute difference of two shape-identical pyramids."""
    if len(pyramid_t1) != len(pyramid_t2):
        raise ValueError("pyramids differ in depth")
    fused = []
    for a, b in zip(pyramid_t1, pyramid_t2):
        if a.shape != b.shape:
            raise ValueError(f"pyramid level shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        fused.append(torch.abs(a - b))
    return tuple(fused)


class C2FNet(nn.Module):
    """Coarse-to-fine Siamese change detector.

    ``forward(t1, t2)`` returns ``(final, coarse)`` logits shaped
    [N, 1, H, W] and [N, 1, H/4, W/4].  The coarse map steers the refinement
    of the shallow scales and is returned for inspection only.
    """

    def __init__(self, width_multiplier: float = 1.0, decoder_width: int = 64,
                 toggles: ModuleToggles | None = None):
        super().__init__()
        if decoder_width < 4 or decoder_width % 4 != 0:
            raise ConfigurationError(
                f"decoder_width must be >= 4 and divisible by 4, got {decoder_width}")
        self.width_multiplier = float(width_multiplier)
        self.decoder_width = int(decoder_width)
        self.toggles = toggles or ModuleToggles()

        self.encoder = SiameseEncoder(width_multiplier)
        chans = self.encoder.channels
        self.channel_attn = nn.ModuleList(ChannelAttention(c) for c in chans)
        self.spatial_attn = nn.ModuleList(SpatialAttention() for _ in chans)

        cd = self.decoder_width
        deep_in = (chans[4], chans[3], chans[2])  # strides 16, 8, 4
        if self.toggles.gcm_abc_enabled:
            self.context_abc = nn.ModuleList(GlobalContextModule(c, cd) for c in deep_in)
        else:
            self.context_abc = nn.ModuleList(nn.Conv2d(c, cd, 1) for c in deep_in)

        if self.toggles.agg_init_enabled:
            self.agg_init = CascadeAggregation(cd, emit_head=True)
        else:
            self.agg_init = nn.Conv2d(cd, 1, 1)

        shallow_in = (cd, chans[1], chans[0])  # refined stride-4/2/1 inputs
        if self.toggles.gcm_cde_enabled:
            self.context_cde = nn.ModuleList(GlobalContextModule(c, cd) for c in shallow_in)
        else:
            self.context_cde = nn.ModuleList(nn.Conv2d(c, cd, 1) for c in shallow_in)

        if self.toggles.agg_final_enabled:
            self.agg_final = CascadeAggregation(cd, emit_head=False)
            head_in = 3 * cd
        else:
            self.agg_final = nn.Conv2d(cd, cd, 1)
            head_in = cd
        self.head = nn.Conv2d(head_in, 1, 3, padding=1)
        self.apply(_init_module)

    def forward(self, t1, t2):
        if t1.shape != t2.shape:
            raise ValueError(f"input shapes differ: {tuple(t1.shape)} vs {tuple(t2.shape)}")
        h, w = t1.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"input dims must be divisible by 16, got {h}x{w}")

        fused = fuse_pyramids(self.encoder(t1), self.encoder(t2))
        fused = tuple(sa(ca(f)) for f, ca, sa in
                      zip(fused, self.channel_attn, self.spatial_attn))

        a1 = self.context_abc[0](fused[4])
        b1 = self.context_abc[1](fused[3])
        c1 = self.context_abc[2](fused[2])

        if self.toggles.agg_init_enabled:
            coarse = self.agg_init(a1, b1, c1)
        else:
            coarse = self.agg_init(c1)

        if self.toggles.refine_enabled:
            y1, y2, y3 = refine_features(fused[0], fused[1], c1, coarse)
        else:
            y1, y2, y3 = fused[0], fused[1], c1

        c2 = self.context_cde[0](y3)
        d2 = self.context_cde[1](y2)
        e2 = self.context_cde[2](y1)

        if self.toggles.agg_final_enabled:
            g = self.agg_final(c2, d2, e2)
        else:
            g = self.agg_final(upsample(c2, 4) + upsample(d2, 2) + e2)

        return self.head(g), coarse


def build_model(width_multiplier: float = 1.0, decoder_width: int = 64,
                toggles: ModuleToggles | None = None, seed: int = 0) -> C2FNet:
    """Construct a C2FNet with seeded Kaiming-uniform initialization."""
    torch.manual_seed(seed)
    return C2FNet(width_multiplier, decoder_width, toggles)


# --- parameter array access -------------------------------------------------
#
# A model's parameter set is an ordered name -> float32 array map covering
# trainable weights and batch-norm running statistics (integer bookkeeping
# buffers are excluded; they play no part in eval-mode inference).

def named_state_tensors(module: nn.Module):
    """Yield (name, tensor) for weights and batch-norm running statistics.

    Integer bookkeeping buffers are skipped; everything yielded is float32 and
    participates in checkpointing and teacher averaging.
    """
    for name, tensor in module.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        yield name, tensor


def get_params(module: nn.Module) -> dict[str, np.ndarray]:
    """Snapshot the model's parameter arrays as float32 numpy copies."""
    return {name: t.detach().cpu().numpy().copy()
            for name, t in named_state_tensors(module)}


def set_params(module: nn.Module, params: dict[str, np.ndarray]) -> None:
    """Load a parameter snapshot, checking names and shapes entry by entry."""
    current = dict(named_state_tensors(module))
    missing = sorted(set(current) - set(params))
    extra = sorted(set(params) - set(current))
    if missing or extra:
        raise ConfigurationError(
            f"parameter names disagree (missing: {missing[:3]}, unexpected: {extra[:3]})")
    for name, tensor in current.items():
        arr = params[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ConfigurationError(
                f"shape disagreement for {name!r}: checkpoint {tuple(arr.shape)} "
                f"vs model {tuple(tensor.shape)}")
        if not np.isfinite(arr).all():
            raise ConfigurationError(f"non-finite values in parameter {name!r}")
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(np.ascontiguousarray(arr)))


def param_checksum(module_or_params) -> str:
    """SHA-256 over parameter names and raw float32 bytes, order-independent."""
    if isinstance(module_or_params, nn.Module):
        items = ((n, t.detach().cpu().numpy())
                 for n, t in named_state_tensors(module_or_params))
    else:
        items = module_or_params.items()
    digest = hashlib.sha256()
    for name, arr in sorted(items, key=lambda kv: kv[0]):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
    return digest.hexdigest()


# --- gradient audit ----------------------------------------------------------

@dataclass
class GradientAuditReport:
    """Outcome of comparing autograd against central finite differences."""

    samples: int
    passed: int
    rel_tol: float
    worst_rel_err: float
    worst_param: str
    failures: list  # (param name, flat index, analytic, numeric, rel err)

    @property
    def pass_fraction(self) -> float:
        return self.passed / self.samples if self.samples else 0.0

    def ok(self, min_fraction: float = 0.95) -> bool:
        return self.pass_fraction >= min_fraction


def _logit_sum(model, t1, t2) -> float:
    final, _ = model(t1, t2)
    return float(final.double().sum().item())


def gradient_audit(width_multiplier: float = 0.125, tile: int = 32,
                   samples: int = 200, step: float = 1e-3, rel_tol: float = 1e-2,
                   seed: int = 0, decoder_width: int = 64,
                   corrupt_param: str | None = None) -> GradientAuditReport:
    """Check autograd of the logit sum against central finite differences.

    The audited object is the float32 model's backward pass.  The central
    differences run on a float64 twin holding bit-identical parameter values:
    at step 1e-3 a float32 forward has an evaluation noise floor of ~5e-5 on
    the logit sum, which would swamp the difference quotient for modestly
    sized gradients, while the float64 evaluation of the same function keeps
    the oracle exact to well below the tolerance.  Both models run in eval
    mode so the map from parameters to logits is a fixed function.

    A sample passes when the relative error ``|a - n| / max(|a|, |n|)`` stays
    under ``rel_tol``; ties at zero pass.  ``corrupt_param`` deliberately
    biases one analytic gradient, for testing the audit's sensitivity.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    model = build_model(width_multiplier, decoder_width, seed=seed)
    model.eval()
    gen = torch.Generator().manual_seed(seed + 1)
    t1 = torch.rand((1, 3, tile, tile), generator=gen)
    t2 = torch.rand((1, 3, tile, tile), generator=gen)

    final, _ = model(t1, t2)
    final.sum().backward()
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]

    oracle = C2FNet(width_multiplier, decoder_width, model.toggles).double()
    oracle.load_state_dict(model.state_dict())
    oracle.eval()
    oracle_params = dict(oracle.named_parameters())
    t1d, t2d = t1.double(), t2.double()

    flat_sizes = [p.numel() for _, p in named]
    total = sum(flat_sizes)
    rng = np.random.default_rng(seed + 2)
    picks = set(int(i) for i in rng.choice(total, size=min(samples, total),
                                           replace=False))
    if corrupt_param is not None:
        offset = 0
        for (name, _), size in zip(named, flat_sizes):
            if name == corrupt_param:
                picks.add(offset)  # the corrupted tensor must be sampled
                break
            offset += size
        else:
            raise ValueError(f"no parameter named {corrupt_param!r}")

    failures = []
    worst = (0.0, "")
    passed = 0
    with torch.no_grad():
        for flat in sorted(picks):
            t_idx = 0
            while flat >= flat_sizes[t_idx]:
                flat -= flat_sizes[t_idx]
                t_idx += 1
            name, param = named[t_idx]
            analytic = float(param.grad.view(-1)[flat].item())
            if corrupt_param is not None and name == corrupt_param:
                analytic = 2.0 * analytic + 1.0

            slot = oracle_params[name].view(-1)
            base = float(slot[flat].item())
            slot[flat] = base + step
            f_hi = _logit_sum(oracle, t1d, t2d)
            slot[flat] = base - step
            f_lo = _logit_sum(oracle, t1d, t2d)
            slot[flat] = base
            numeric = (f_hi - f_lo) / (2.0 * step)

            scale = max(abs(analytic), abs(numeric))
            rel = 0.0 if scale < 1e-12 else abs(analytic - numeric) / scale
            if rel < rel_tol:
                passed += 1
            else:
                failures.append((name, flat, analytic, numeric, rel))
            if rel > worst[0]:
                worst = (rel, name)

    return GradientAuditReport(samples=len(picks), passed=passed, rel_tol=rel_tol,
                               worst_rel_err=worst[0], worst_param=worst[1],
                               failures=failures)
