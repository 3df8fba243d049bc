"""U-Net style translation networks mapping a C-channel image to an RGB-like one.

The ``tiny`` backbone is a plain U-Net small enough to train on a CPU in
minutes. The other backbones reuse torchvision encoder definitions (random
init by default; pretrained encoder weights can be injected through
``encoder_weights``) with a U-Net decoder on top.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

SCHEMA_VERSION = 1


class Backbone(str, enum.Enum):
    TINY = "tiny"
    MOBILENET_V3_SMALL = "mobilenet_v3_small"
    MOBILENET_V2 = "mobilenet_v2"
    RESNET18 = "resnet18"
    RESNET34 = "resnet34"


# Encoder depth is fixed by the torchvision architectures.
_FIXED_DEPTH = {
    Backbone.MOBILENET_V3_SMALL: 5,
    Backbone.MOBILENET_V2: 5,
    Backbone.RESNET18: 5,
    Backbone.RESNET34: 5,
}

DECODER_WIDTHS = (256, 128, 64, 32, 16)


@dataclass(frozen=True)
class TranslatorConfig:
    backbone: Backbone = Backbone.TINY
    in_channels: int = 1
    base_width: int = 16
    depth: int = 3

    def __post_init__(self):
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 4:
            raise ValueError(f"base_width must be >= 4, got {self.base_width}")
        fixed = _FIXED_DEPTH.get(self.backbone)
        if fixed is not None and self.depth != fixed:
            raise ValueError(f"{self.backbone.value} encoder has depth {fixed}, got {self.depth}")

    @classmethod
    def standard(cls, backbone: "Backbone | str", in_channels: int = 1) -> "TranslatorConfig":
        backbone = Backbone(backbone)
        return cls(backbone=backbone, in_channels=in_channels, depth=_FIXED_DEPTH.get(backbone, 3))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.value
        return d


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class _TinyEncoder(nn.Module):
    def __init__(self, in_channels: int, base_width: int, depth: int):
        super().__init__()
        widths = [base_width * 2**i for i in range(depth + 1)]
        self.stages = nn.ModuleList([_conv_block(in_channels, widths[0])])
        for i in range(depth):
            self.stages.append(nn.Sequential(nn.MaxPool2d(2), _conv_block(widths[i], widths[i + 1])))
        self.out_channels = widths

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class _TorchvisionEncoder(nn.Module):
    """Wraps a torchvision classifier trunk so it returns features at strides 2..32."""

    def __init__(self, backbone: Backbone, in_channels: int, tv_state: dict | None = None):
        super().__init__()
        import torchvision.models as tvm

        self.backbone = backbone
        net = getattr(tvm, backbone.value)(weights=None)
        if tv_state is not None:
            net.load_state_dict(tv_state, strict=False)
        if backbone in (Backbone.RESNET18, Backbone.RESNET34):
            if in_channels != 3:
                net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
            self.stages = nn.ModuleList([
                nn.Sequential(net.conv1, net.bn1, net.relu),
                nn.Sequential(net.maxpool, net.layer1),
                net.layer2,
                net.layer3,
                net.layer4,
            ])
            self.out_channels = [in_channels, 64, 64, 128, 256, 512]
        else:
            features = net.features
            first = features[0][0]
            if in_channels != 3:
                features[0][0] = nn.Conv2d(
                    in_channels, first.out_channels, first.kernel_size,
                    stride=first.stride, padding=first.padding, bias=False,
                )
            # Split points where the feature stride doubles.
            if backbone is Backbone.MOBILENET_V2:
                cuts = [0, 2, 4, 7, 14, 18]
            else:
                cuts = [0, 1, 2, 4, 9, 12]
            self.stages = nn.ModuleList(
                [features[cuts[i]:cuts[i + 1]] for i in range(5)]
            )
            self.out_channels = [in_channels] + [_last_channels(s) for s in self.stages]

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = [x]
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def _last_channels(module: nn.Module) -> int:
    convs = [m for m in module.modules() if isinstance(m, nn.Conv2d)]
    return convs[-1].out_channels


class _DecoderBlock(nn.Module):
    def __init__(self, cin: int, skip: int, cout: int):
        super().__init__()
        self.block = _conv_block(cin + skip, cout)

    def forward(self, x: Tensor, skip: Tensor | None) -> Tensor:
        size = skip.shape[-2:] if skip is not None else (x.shape[-2] * 2, x.shape[-1] * 2)
        x = F.interpolate(x, size=size, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.block(x)


class TranslationNetwork(nn.Module):
    """Encoder-decoder with concatenation skips and a 3-channel sigmoid head.

    Accepts ``(C, H, W)`` or ``(B, C, H, W)`` inputs of any spatial size;
    sizes not divisible by ``2**depth`` are reflect-padded and the output is
    cropped back, so the output always matches the input resolution.
    """

    def __init__(self, config: TranslatorConfig):
        super().__init__()
        self.config = config
        if config.backbone is Backbone.TINY:
            self.encoder = _TinyEncoder(config.in_channels, config.base_width, config.depth)
            widths = self.encoder.out_channels
            blocks = []
            for i in range(config.depth, 0, -1):
                blocks.append(_DecoderBlock(widths[i], widths[i - 1], widths[i - 1]))
            self.decoder = nn.ModuleList(blocks)
            head_in = widths[0]
        else:
            self.encoder = _TorchvisionEncoder(config.backbone, config.in_channels)
            enc = self.encoder.out_channels
            # skips for decoder stages: strides 16, 8, 4, 2, then none at full res
            skips = [enc[4], enc[3], enc[2], enc[1], 0]
            cin = enc[5]
            blocks = []
            for skip, cout in zip(skips, DECODER_WIDTHS):
                blocks.append(_DecoderBlock(cin, skip, cout))
                cin = cout
            self.decoder = nn.ModuleList(blocks)
            head_in = DECODER_WIDTHS[-1]
        self.head = nn.Conv2d(head_in, 3, 3, padding=1)

    @property
    def multiple(self) -> int:
        return 2 ** self.config.depth

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"translator expects {self.config.in_channels} channels, got {x.shape[1]}"
            )
        h, w = x.shape[-2:]
        x, crop = _pad_to_multiple(x, self.multiple)
        feats = self.encoder(x)
        if self.config.backbone is Backbone.TINY:
            y = feats[-1]
            for block, skip in zip(self.decoder, reversed(feats[:-1])):
                y = block(y, skip)
        else:
            y = feats[-1]
            skips = [feats[4], feats[3], feats[2], feats[1], None]
            for block, skip in zip(self.decoder, skips):
                y = block(y, skip)
        y = torch.sigmoid(self.head(y))
        top, left = crop
        y = y[..., top:top + h, left:left + w]
        return y.squeeze(0) if squeeze else y


def _pad_to_multiple(x: Tensor, multiple: int) -> tuple[Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph = math.ceil(h / multiple) * multiple - h
    pw = math.ceil(w / multiple) * multiple - w
    if ph == 0 and pw == 0:
        return x, (0, 0)
    top, left = ph // 2, pw // 2
    pad = (left, pw - left, top, ph - top)
    # reflect padding needs pad < dim; fall back to replicate for tiny inputs
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, pad, mode=mode), (top, left)


def build_translator(config: TranslatorConfig, seed: int = 0) -> TranslationNetwork:
    """Build a translator with parameters fully determined by ``(config, seed)``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = TranslationNetwork(config)
    net.seed = seed
    return net


def translate(net: TranslationNetwork, x: Tensor) -> Tensor:
    return net(x)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def flat_parameters(net: nn.Module) -> Tensor:
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()])


def config_digest(obj) -> str:
    """Short sha256 over the canonical JSON of a config-like mapping."""
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(net: TranslationNetwork, path: "str | Path", training_config=None,
                    extra: dict | None = None) -> Path:
    """Write ``<path>.pt`` (state dict) and ``<path>.json`` (manifest). Returns the manifest path."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    stem.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), stem.with_suffix(".pt"))
    cfg = net.config
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "backbone": cfg.backbone.value,
        "in_channels": cfg.in_channels,
        "depth": cfg.depth,
        "base_width": cfg.base_width,
        "seed": getattr(net, "seed", None),
        "parameter_count": parameter_count(net),
        "training_config_digest": config_digest(training_config) if training_config is not None else None,
        "decoder": "unet-concat-bn-relu-nearest",
    }
    if extra:
        manifest.update(extra)
    manifest_path = stem.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(path: "str | Path") -> tuple[TranslationNetwork, dict]:
    """Load a translator from either its ``.json`` manifest or ``.pt`` blob path."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    manifest_path, blob_path = stem.with_suffix(".json"), stem.with_suffix(".pt")
    if not manifest_path.exists() or not blob_path.exists():
        raise FileNotFoundError(f"translator checkpoint incomplete: need {manifest_path} and {blob_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{manifest_path}: unsupported schema_version {manifest.get('schema_version')}")
    config = TranslatorConfig(
        backbone=manifest["backbone"],
        in_channels=manifest["in_channels"],
        base_width=manifest["base_width"],
        depth=manifest["depth"],
    )
    net = TranslationNetwork(config)
    state = torch.load(blob_path, map_location="cpu", weights_only=True)
    net.load_state_dict(state)
    net.seed = manifest.get("seed")
    net.eval()
    if parameter_count(net) != manifest["parameter_count"]:
        raise ValueError(f"{manifest_path}: parameter_count mismatch")
    return net, manifest


def load_encoder_weights(net: TranslationNetwork, state_dict: dict) -> None:
    """Plugin point for pretrained encoders.

    ``state_dict`` uses the key layout of the matching torchvision classifier
    (e.g. a saved ``torchvision.models.resnet34`` checkpoint). A first conv whose
    input channels differ from the translator's is skipped.
    """
    cfg = net.config
    if cfg.backbone is Backbone.TINY:
        net.encoder.load_state_dict(state_dict)
        return
    fresh = _TorchvisionEncoder(cfg.backbone, 3, tv_state=state_dict)
    own = net.encoder.state_dict()
    loaded = {k: v for k, v in fresh.state_dict().items() if k in own and own[k].shape == v.shape}
    net.encoder.load_state_dict(loaded, strict=False)
