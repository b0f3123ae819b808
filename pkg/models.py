"""
Network definitions for the DSA-LTD project.

Three U-Net style encoder-decoders share one backbone definition:
- TDL: 10 stacked frames (k-9..k) -> learned temporal difference
- LRS: key frame -> liver probability map
- FFS: concatenation of the key frame with auxiliary maps -> tumor probability map

The FFS input layout is configurable so that ablation variants (raw motion
maps, no liver guidance, ...) reuse the same code path.
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from constants import (
    CHECKPOINT_HEADER,
    FRAME_DIFF_OFFSET,
    FULL_FFS_INPUTS,
    FUSION_INPUTS,
    KEY_FRAME,
    LIVER_MAP,
    RAW_MOTION_INPUTS,
    TDL_OUTPUT,
    TDL_STACK_SIZE,
)
from core import ShapeError, Frame, ProbabilityMap, Sample
from logging_config import logger
from motion import extract_motion

ACTIVATIONS = ("sigmoid", "none")


@dataclass(frozen=True)
class BackboneConfig:
    """
    Attributes:
        in_channels: Input channels
        out_channels: Output channels
        base_width: Channels of the first level, doubled at each level down
        depth: Number of down/up sampling levels
        final_activation: "sigmoid" or "none"
        batch_norm: Per-channel batch normalization after each convolution
    """

    in_channels: int
    out_channels: int = 1
    base_width: int = 16
    depth: int = 4
    final_activation: str = "sigmoid"
    batch_norm: bool = True

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 4:
            raise ValueError(f"base_width must be >= 4, got {self.base_width}")
        if self.final_activation not in ACTIVATIONS:
            raise ValueError(f"final_activation must be one of {ACTIVATIONS}")

    @property
    def size_multiple(self) -> int:
        return 2**self.depth


@dataclass(frozen=True)
class BundleConfig:
    """
    Full description of a ModelBundle.

    Attributes:
        ffs: Fusion network config; in_channels == len(ffs_inputs)
        ffs_inputs: Ordered names of the maps concatenated into FFS
        tdl: TDL config, present iff "tdl_output" is a fusion input
        lrs: LRS config, present iff "liver_map" is a fusion input
        fd_offset: Offset of the raw frame-difference input (TDL supervision stays at 9)
    """

    ffs: BackboneConfig
    ffs_inputs: Tuple[str, ...] = FULL_FFS_INPUTS
    tdl: Optional[BackboneConfig] = None
    lrs: Optional[BackboneConfig] = None
    fd_offset: int = FRAME_DIFF_OFFSET

    def __post_init__(self) -> None:
        object.__setattr__(self, "ffs_inputs", tuple(self.ffs_inputs))
        check_fusion_inputs(self.ffs_inputs)
        if self.fd_offset < 1:
            raise ValueError(f"fd_offset must be >= 1, got {self.fd_offset}")
        if self.ffs.in_channels != len(self.ffs_inputs):
            logger.error(
                f"FFS expects {self.ffs.in_channels} channels but layout has {len(self.ffs_inputs)}"
            )
            raise ValueError("ffs.in_channels must equal the number of fusion inputs")
        if (TDL_OUTPUT in self.ffs_inputs) != (self.tdl is not None):
            raise ValueError("a TDL config is required exactly when tdl_output is fused")
        if (LIVER_MAP in self.ffs_inputs) != (self.lrs is not None):
            raise ValueError("an LRS config is required exactly when liver_map is fused")
        if self.tdl is not None and self.tdl.in_channels != TDL_STACK_SIZE:
            raise ValueError(f"tdl.in_channels must be {TDL_STACK_SIZE}")
        if self.lrs is not None and self.lrs.in_channels != 1:
            raise ValueError("lrs.in_channels must be 1")
        for name, cfg in (("tdl", self.tdl), ("lrs", self.lrs), ("ffs", self.ffs)):
            if cfg is not None and cfg.out_channels != 1:
                raise ValueError(f"{name}.out_channels must be 1")

    @property
    def size_multiple(self) -> int:
        return max(
            cfg.size_multiple for cfg in (self.tdl, self.lrs, self.ffs) if cfg is not None
        )

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "BundleConfig":
        def backbone(d: Optional[Dict]) -> Optional[BackboneConfig]:
            return None if d is None else BackboneConfig(**d)

        return cls(
            ffs=BackboneConfig(**data["ffs"]),
            ffs_inputs=tuple(data["ffs_inputs"]),
            tdl=backbone(data.get("tdl")),
            lrs=backbone(data.get("lrs")),
            fd_offset=int(data.get("fd_offset", FRAME_DIFF_OFFSET)),
        )


def check_fusion_inputs(ffs_inputs: Sequence[str]) -> None:
    """
    Raise ValueError unless the fusion layout is well formed.

    The key frame is always first; the learned temporal difference and the raw
    motion maps exclude each other.
    """
    unknown = [name for name in ffs_inputs if name not in FUSION_INPUTS]
    if unknown:
        raise ValueError(f"unknown fusion inputs {unknown}")
    if len(set(ffs_inputs)) != len(ffs_inputs):
        raise ValueError(f"duplicate fusion inputs in {list(ffs_inputs)}")
    if not ffs_inputs or ffs_inputs[0] != KEY_FRAME:
        raise ValueError("the key frame must be the first fusion input")
    if TDL_OUTPUT in ffs_inputs and any(n in RAW_MOTION_INPUTS for n in ffs_inputs):
        raise ValueError("tdl_output and raw motion maps are mutually exclusive")


def bundle_config_for(
    ffs_inputs: Sequence[str] = FULL_FFS_INPUTS,
    base_width: int = 16,
    depth: int = 4,
    batch_norm: bool = True,
    fd_offset: int = FRAME_DIFF_OFFSET,
) -> BundleConfig:
    """Build the BundleConfig of a fusion layout with shared backbone settings."""
    ffs_inputs = tuple(ffs_inputs)

    def backbone(in_channels: int) -> BackboneConfig:
        return BackboneConfig(
            in_channels=in_channels,
            base_width=base_width,
            depth=depth,
            batch_norm=batch_norm,
        )

    return BundleConfig(
        ffs=backbone(len(ffs_inputs)),
        ffs_inputs=ffs_inputs,
        tdl=backbone(TDL_STACK_SIZE) if TDL_OUTPUT in ffs_inputs else None,
        lrs=backbone(1) if LIVER_MAP in ffs_inputs else None,
        fd_offset=fd_offset,
    )


class DoubleConv(nn.Module):
    """(3x3 conv -> [BN] -> ReLU) x 2"""

    def __init__(self, in_channels: int, out_channels: int, batch_norm: bool) -> None:
        super().__init__()
        layers = []
        for cin in (in_channels, out_channels):
            layers.append(
                nn.Conv2d(cin, out_channels, kernel_size=3, padding=1, bias=not batch_norm)
            )
            if batch_norm:
                layers.append(nn.BatchNorm2d(out_channels))
            layers.append(nn.ReLU(inplace=True))
        self.block = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class Up(nn.Module):
    """Transposed-conv upsampling, skip concatenation, DoubleConv."""

    def __init__(self, in_channels: int, out_channels: int, batch_norm: bool) -> None:
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=2, stride=2)
        self.conv = DoubleConv(2 * out_channels, out_channels, batch_norm)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.cat([skip, self.up(x)], dim=1))


class UNet(nn.Module):
    """Symmetric encoder-decoder with a skip connection at every level."""

    def __init__(self, config: BackboneConfig) -> None:
        super().__init__()
        self.config = config
        widths = [config.base_width * 2**level for level in range(config.depth + 1)]
        self.inc = DoubleConv(config.in_channels, widths[0], config.batch_norm)
        self.downs = nn.ModuleList(
            nn.Sequential(
                nn.MaxPool2d(2), DoubleConv(widths[i - 1], widths[i], config.batch_norm)
            )
            for i in range(1, config.depth + 1)
        )
        self.ups = nn.ModuleList(
            Up(widths[i], widths[i - 1], config.batch_norm)
            for i in range(config.depth, 0, -1)
        )
        self.head = nn.Conv2d(widths[0], config.out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_input(x, self.config)
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        y = skips.pop()
        for up in self.ups:
            y = up(y, skips.pop())
        logits = self.head(y)
        if self.config.final_activation == "sigmoid":
            return torch.sigmoid(logits)
        return logits


def check_input(x: torch.Tensor, config: BackboneConfig) -> None:
    """
    Raise ShapeError unless x is (batch, in_channels, H, W) with H, W divisible by 2^depth.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D (batch, channels, H, W) tensor, got {tuple(x.shape)}")
    if x.shape[1] != config.in_channels:
        logger.error(f"Network expects {config.in_channels} channels, got {x.shape[1]}")
        raise ShapeError(f"expected {config.in_channels} input channels, got {x.shape[1]}")
    multiple = config.size_multiple
    if x.shape[2] % multiple or x.shape[3] % multiple:
        raise ShapeError(
            f"spatial size {tuple(x.shape[2:])} must be divisible by {multiple}"
        )


class FusionOutputs(NamedTuple):
    """I_LTD, I_LRS, I_seg; absent networks give None."""

    ltd: Optional[torch.Tensor]
    lrs: Optional[torch.Tensor]
    seg: torch.Tensor


class ModelBundle(nn.Module):
    """The TDL, LRS and FFS networks plus the fusion layout."""

    def __init__(
        self,
        config: BundleConfig,
        tdl: Optional[UNet],
        lrs: Optional[UNet],
        ffs: UNet,
    ) -> None:
        super().__init__()
        self.config = config
        self.tdl = tdl
        self.lrs = lrs
        self.ffs = ffs

    @property
    def ffs_inputs(self) -> Tuple[str, ...]:
        return self.config.ffs_inputs

    @property
    def raw_motion_inputs(self) -> Tuple[str, ...]:
        return tuple(n for n in self.ffs_inputs if n in RAW_MOTION_INPUTS)


def _seeded_unet(config: BackboneConfig, seed: int) -> UNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(config)


def build_bundle(config: BundleConfig, seed: int = 0) -> ModelBundle:
    """
    Build the three networks with seeded, independent initializations.

    Args:
        config: Bundle description; channel invariants are checked on construction
        seed: Initialization seed; equal seeds give identical parameters

    Returns:
        ModelBundle in training mode
    """
    tdl = _seeded_unet(config.tdl, seed) if config.tdl is not None else None
    lrs = _seeded_unet(config.lrs, seed + 1) if config.lrs is not None else None
    ffs = _seeded_unet(config.ffs, seed + 2)
    bundle = ModelBundle(config, tdl, lrs, ffs)
    logger.debug(
        f"Built bundle {list(config.ffs_inputs)} with {count_parameters(bundle)} parameters"
    )
    return bundle


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def zero_final_layers(bundle: ModelBundle) -> None:
    """Zero the 1x1 output convolutions; every sigmoid output becomes 0.5."""
    with torch.no_grad():
        for net in (bundle.tdl, bundle.lrs, bundle.ffs):
            if net is not None:
                net.head.weight.zero_()
                net.head.bias.zero_()


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    # (H, W) and (C, H, W) are single samples
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    return x


def tdl_forward(bundle: ModelBundle, stack: torch.Tensor) -> torch.Tensor:
    """
    Learned temporal difference of frames k-9..k.

    Args:
        bundle: Model bundle with a TDL network
        stack: (10, H, W) or (batch, 10, H, W)

    Returns:
        (batch, 1, H, W) map in [0, 1]

    Raises:
        ShapeError: If the stack does not have exactly 10 channels
    """
    if bundle.tdl is None:
        raise ValueError("bundle has no TDL network")
    return bundle.tdl(_as_batch(stack))


def lrs_forward(bundle: ModelBundle, key_frame: torch.Tensor) -> torch.Tensor:
    """
    Liver probability map of the key frame.

    Args:
        key_frame: (H, W), (1, H, W) or (batch, 1, H, W)

    Returns:
        (batch, 1, H, W) map in [0, 1]
    """
    if bundle.lrs is None:
        raise ValueError("bundle has no LRS network")
    return bundle.lrs(_as_batch(key_frame))


def fuse(bundle: ModelBundle, maps: Dict[str, torch.Tensor]) -> torch.Tensor:
    """
    Concatenate the fusion inputs in layout order and run FFS.

    Args:
        maps: Name -> (batch, 1, H, W) tensor for every name in bundle.ffs_inputs

    Raises:
        KeyError: If a fusion input is missing
        ShapeError: If the maps disagree on dimensions
    """
    missing = [n for n in bundle.ffs_inputs if n not in maps]
    if missing:
        raise KeyError(f"missing fusion inputs {missing}")
    tensors = [_as_batch(maps[n]) for n in bundle.ffs_inputs]
    reference = tensors[0].shape
    for name, t in zip(bundle.ffs_inputs, tensors):
        if t.shape != reference:
            logger.error(f"Fusion input {name} has shape {tuple(t.shape)}, expected {tuple(reference)}")
            raise ShapeError(f"fusion input {name} shape {tuple(t.shape)} != {tuple(reference)}")
    return bundle.ffs(torch.cat(tensors, dim=1))


def ffs_forward(
    bundle: ModelBundle,
    key_frame: torch.Tensor,
    temporal_diff: torch.Tensor,
    liver_map: torch.Tensor,
) -> torch.Tensor:
    """
    Tumor probability map from the full three-input layout.

    Raises:
        ShapeError: If the three inputs differ in dimensions
    """
    if bundle.ffs_inputs != FULL_FFS_INPUTS:
        raise ValueError(f"ffs_forward needs layout {FULL_FFS_INPUTS}, bundle has {bundle.ffs_inputs}")
    return fuse(
        bundle,
        {KEY_FRAME: key_frame, TDL_OUTPUT: temporal_diff, LIVER_MAP: liver_map},
    )


def forward_batch(bundle: ModelBundle, batch: Dict[str, torch.Tensor]) -> FusionOutputs:
    """
    End-to-end pass over a collated batch.

    I_LTD and I_LRS enter the fusion without detaching, so the segmentation
    loss reaches the TDL and LRS parameters.

    Args:
        batch: Needs "key_frame" (B, 1, H, W), "stack" (B, 10, H, W) when TDL is
            present, and each raw motion map used by the layout

    Returns:
        FusionOutputs(ltd, lrs, seg)
    """
    maps: Dict[str, torch.Tensor] = {KEY_FRAME: batch[KEY_FRAME]}
    ltd = tdl_forward(bundle, batch["stack"]) if bundle.tdl is not None else None
    liver = lrs_forward(bundle, batch[KEY_FRAME]) if bundle.lrs is not None else None
    if ltd is not None:
        maps[TDL_OUTPUT] = ltd
    if liver is not None:
        maps[LIVER_MAP] = liver
    for name in bundle.raw_motion_inputs:
        maps[name] = batch[name]
    return FusionOutputs(ltd=ltd, lrs=liver, seg=fuse(bundle, maps))


def sample_inputs(
    bundle: ModelBundle,
    sample: Sample,
    frame_index: Optional[int] = None,
    dtype: torch.dtype = torch.float32,
) -> Dict[str, torch.Tensor]:
    """
    Network inputs of one sample at frame j (default: its key frame), batch of 1.

    Raises:
        ValueError: If frame j - 9 does not exist
    """
    j = sample.key_frame_index if frame_index is None else frame_index
    start = j - (TDL_STACK_SIZE - 1)
    if start < 0 or j >= sample.video.frame_count:
        raise ValueError(f"frame {j} needs frames {start}..{j} inside the video")
    frames = sample.video.frames
    batch = {
        KEY_FRAME: frame_tensor(frames[j], dtype),
        "stack": torch.as_tensor(np.ascontiguousarray(frames[start : j + 1]), dtype=dtype)[None],
    }
    for name in bundle.raw_motion_inputs:
        motion = extract_motion(sample.video, j, name, offset=bundle.config.fd_offset)
        batch[name] = frame_tensor(motion.pixels, dtype)
    return batch


def full_forward(
    bundle: ModelBundle, sample: Sample, frame_index: Optional[int] = None
) -> FusionOutputs:
    """
    Run TDL on frames k-9..k, LRS on frame k and FFS on the fused maps.

    Args:
        bundle: Model bundle
        sample: Valid sample with key_frame_index >= 9
        frame_index: Frame to segment instead of the key frame

    Returns:
        FusionOutputs of (1, 1, H, W) tensors
    """
    reference = next(bundle.parameters())
    batch = {
        name: t.to(reference.device)
        for name, t in sample_inputs(bundle, sample, frame_index, reference.dtype).items()
    }
    return forward_batch(bundle, batch)


def to_probability_map(t: torch.Tensor) -> ProbabilityMap:
    """(1, 1, H, W) or (H, W) tensor -> float64 numpy map."""
    return t.detach().to("cpu", torch.float64).numpy().reshape(t.shape[-2:])


def frame_tensor(frame: Frame, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(frame), dtype=dtype)[None, None]


def save_checkpoint(bundle: ModelBundle, path: Union[str, Path], step: int) -> None:
    """Write all three networks, the bundle config and the step counter to one archive."""
    payload = {
        "header": CHECKPOINT_HEADER,
        "bundle_config": bundle.config.to_dict(),
        "step": int(step),
        "state_dict": {
            name: {k: v.detach().cpu() for k, v in net.state_dict().items()}
            for name, net in (("tdl", bundle.tdl), ("lrs", bundle.lrs), ("ffs", bundle.ffs))
            if net is not None
        },
    }
    torch.save(payload, path)
    logger.debug(f"Saved checkpoint (step {step}) to {path}")


def load_checkpoint(
    path: Union[str, Path], expected: Optional[BundleConfig] = None
) -> Tuple[ModelBundle, int]:
    """
    Rebuild a bundle from a checkpoint archive.

    Args:
        path: Checkpoint path
        expected: If given, the stored config must equal it

    Returns:
        (bundle in eval mode, training step)

    Raises:
        FileNotFoundError: If the file is missing
        ValueError: On header, config or parameter mismatch
    """
    if not Path(path).exists():
        logger.error(f"Checkpoint {path} not found")
        raise FileNotFoundError(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("header") != CHECKPOINT_HEADER:
        logger.error(f"{path} is not a {CHECKPOINT_HEADER} checkpoint")
        raise ValueError(f"{path}: unsupported checkpoint header")
    config = BundleConfig.from_dict(payload["bundle_config"])
    if expected is not None and config != expected:
        logger.error(f"Checkpoint config {config} differs from expected {expected}")
        raise ValueError("checkpoint config does not match the requested model")
    bundle = build_bundle(config)
    for name, state in payload["state_dict"].items():
        net = getattr(bundle, name)
        if net is None:
            raise ValueError(f"checkpoint holds weights for absent network {name}")
        try:
            net.load_state_dict(state)
        except RuntimeError as e:
            logger.error(f"Parameters of {name} do not fit the stored config: {e}")
            raise ValueError(f"checkpoint/config mismatch in {name}") from e
    bundle.eval()
    return bundle, int(payload["step"])
