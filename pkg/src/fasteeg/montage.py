"""Electrode layouts and the channel-to-functional-area partition."""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

# 64-electrode 10-10 cap; FCz is the reference and AFz the ground.
CAP_64 = (
    "Fp1 Fz F3 F7 FT9 FC5 FC1 C3 T7 TP9 CP5 CP1 Pz P3 P7 O1 Oz O2 P4 P8 TP10 CP6 CP2 Cz "
    "C4 T8 FT10 FC6 FC2 F4 F8 Fp2 AF7 AF3 AFz F1 F5 FT7 FC3 C1 C5 TP7 CP3 P1 P5 PO7 PO3 "
    "POz PO4 PO8 P6 P2 CPz CP4 TP8 C6 C2 FC4 FT8 F6 AF8 AF4 F2 FCz"
).split()
CAP_REFERENCE = "FCz"
CAP_GROUND = "AFz"

M8_REGIONS = (
    "prefrontal", "frontal", "left_temporal", "right_temporal",
    "precentral", "postcentral", "parietal", "occipital",
)

# Each coarser configuration maps M8 region names onto its own regions; M8
# regions missing from a map are dropped (M2/M1 configurations only).
MERGE_RULES: dict[str, dict[str, str]] = {
    "M8": {r: r for r in M8_REGIONS},
    "M5": {
        "prefrontal": "frontal", "frontal": "frontal",
        "left_temporal": "temporal", "right_temporal": "temporal",
        "precentral": "central", "postcentral": "central",
        "parietal": "parietal", "occipital": "occipital",
    },
    "M4": {
        "prefrontal": "frontal", "frontal": "frontal",
        "left_temporal": "temporal", "right_temporal": "temporal",
        "precentral": "central", "postcentral": "central",
        "parietal": "occipital", "occipital": "occipital",
    },
    "M3": {
        "prefrontal": "frontal", "frontal": "frontal",
        "left_temporal": "central", "right_temporal": "central",
        "precentral": "central", "postcentral": "central",
        "parietal": "occipital", "occipital": "occipital",
    },
    "M2_FT": {
        "prefrontal": "frontal", "frontal": "frontal",
        "left_temporal": "temporal", "right_temporal": "temporal",
    },
    "M1_F": {"prefrontal": "frontal", "frontal": "frontal"},
    "M1_T": {"left_temporal": "temporal", "right_temporal": "temporal"},
}
CONFIGS = tuple(MERGE_RULES)
FULL_COVER = ("M8", "M5", "M4", "M3")

_REGION_ORDER = ("prefrontal", "frontal", "left_temporal", "right_temporal", "temporal",
                 "precentral", "postcentral", "central", "parietal", "occipital")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelLayout:
    labels: tuple[str, ...]
    sample_rate: float = 200.0
    reference: str | None = None
    ground: str | None = None

    @property
    def n_channels(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


def load_layout(spec: Mapping | str | Path) -> ChannelLayout:
    """Build a validated layout.

    ``spec`` is a mapping (or a JSON file path) with either ``electrodes`` (the
    full cap, reference/ground removed here) or ``channels`` (data channels
    only, which must not contain reference/ground), plus optional
    ``reference``, ``ground`` and ``sample_rate``.
    """
    if not isinstance(spec, Mapping):
        import json
        spec = json.loads(Path(spec).read_text())
    ref, gnd = spec.get("reference"), spec.get("ground")
    if "electrodes" in spec:
        labels = [lab for lab in spec["electrodes"] if lab not in (ref, gnd)]
        raw = list(spec["electrodes"])
    elif "channels" in spec:
        labels = list(spec["channels"])
        raw = labels
        for special in (ref, gnd):
            if special is not None and special in labels:
                raise LayoutError(f"{special} is the reference/ground and cannot be a data channel")
    else:
        raise LayoutError("layout needs 'electrodes' or 'channels'")
    seen = set()
    for lab in raw:
        if lab in seen:
            raise LayoutError(f"duplicate channel label {lab!r}")
        seen.add(lab)
    if not labels:
        raise LayoutError("layout has no data channels")
    return ChannelLayout(tuple(labels), float(spec.get("sample_rate", 200.0)), ref, gnd)


def default_layout(sample_rate: float = 200.0) -> ChannelLayout:
    """The 62 data channels of the 64-electrode cap."""
    return load_layout({"electrodes": CAP_64, "reference": CAP_REFERENCE,
                        "ground": CAP_GROUND, "sample_rate": sample_rate})


def toy_layout(sample_rate: float = 200.0) -> ChannelLayout:
    """Eight channels, one per M8 region."""
    return load_layout({"channels": ["Fp1", "F3", "T7", "T8", "FC1", "C3", "P3", "O1"],
                        "sample_rate": sample_rate})


_PREFIX_RULES = (
    ("Fp", "prefrontal"), ("AF", "prefrontal"),
    ("FT", "temporal"), ("FC", "precentral"), ("F", "frontal"),
    ("TP", "temporal"), ("T", "temporal"),
    ("CP", "parietal"), ("C", "postcentral"),
    ("PO", "occipital"), ("P", "parietal"), ("O", "occipital"),
)


def default_region(label: str) -> str:
    """M8 region of a 10-10 label from its row prefix.

    Temporal sites split left/right by odd/even index; midline (z) sites follow
    their row.
    """
    m = re.fullmatch(r"([A-Za-z]+?)(\d+|z|Z)", label)
    if m is None:
        raise LayoutError(f"no region rule for channel {label!r}")
    prefix, suffix = m.group(1), m.group(2)
    for pre, region in _PREFIX_RULES:
        if prefix == pre:
            if region == "temporal":
                if suffix.lower() == "z":
                    raise LayoutError(f"no region rule for midline temporal channel {label!r}")
                return "left_temporal" if int(suffix) % 2 else "right_temporal"
            return region
    raise LayoutError(f"no region rule for channel {label!r}")


def read_partition_asset(path: str | Path) -> tuple[str, dict[str, str]]:
    """Read a ``label<TAB>region`` table; returns (config id, ordered mapping)."""
    config = None
    mapping: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*config:\s*(\S+)", line)
            if m:
                config = m.group(1)
            continue
        parts = line.split("\t")
        if parts == ["label", "region"]:
            continue
        if len(parts) != 2:
            raise LayoutError(f"malformed partition row: {raw!r}")
        mapping[parts[0]] = parts[1]
    if config is None:
        raise LayoutError(f"{path}: missing '# config:' header")
    return config, mapping


def write_partition_asset(path: str | Path, config: str, mapping: Mapping[str, str]) -> None:
    lines = [f"# config: {config}", "label\tregion"]
    lines += [f"{lab}\t{reg}" for lab, reg in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def default_m8_mapping() -> dict[str, str]:
    """The shipped M8 table for the 62-channel layout."""
    with resources.as_file(resources.files("fasteeg") / "assets" / "partition_m8.tsv") as p:
        return read_partition_asset(p)[1]


@dataclass(frozen=True)
class RegionPartition:
    config: str
    region_names: tuple[str, ...]
    labels: tuple[tuple[str, ...], ...]   # channel labels per region
    indices: tuple[tuple[int, ...], ...]  # positions in the layout, aligned with ``labels``
    n_channels: int                       # data channels in the source layout

    @property
    def M(self) -> int:
        return len(self.region_names)

    @property
    def region_sizes(self) -> tuple[int, ...]:
        return tuple(len(i) for i in self.indices)

    def region_of(self, label: str) -> str | None:
        for name, labs in zip(self.region_names, self.labels):
            if label in labs:
                return name
        return None


def build_partition(
    layout: ChannelLayout,
    config: str = "M8",
    base_mapping: Mapping[str, str] | None = None,
) -> RegionPartition:
    """Group the layout's channels into the regions of ``config``.

    ``base_mapping`` assigns labels to M8 regions; its order fixes the order of
    channels inside each region. Labels absent from it fall back to the
    prefix rules and sort after the mapped ones, in layout order.
    """
    if config not in MERGE_RULES:
        raise LayoutError(f"unknown partition config {config!r}; expected one of {CONFIGS}")
    if base_mapping is None:
        base_mapping = default_m8_mapping()
    rank = {lab: i for i, lab in enumerate(base_mapping)}
    merge = MERGE_RULES[config]
    groups: dict[str, list[str]] = {}
    for lab in layout.labels:
        m8 = base_mapping[lab] if lab in base_mapping else default_region(lab)
        if m8 not in M8_REGIONS:
            raise LayoutError(f"channel {lab!r} mapped to unknown region {m8!r}")
        target = merge.get(m8)
        if target is not None:
            groups.setdefault(target, []).append(lab)
    expected = sorted(set(merge.values()), key=_REGION_ORDER.index)
    missing = [r for r in expected if r not in groups]
    if missing:
        raise LayoutError(f"{config}: regions without channels: {missing}")
    labels, indices = [], []
    pos = {lab: i for i, lab in enumerate(layout.labels)}
    for region in expected:
        labs = sorted(groups[region], key=lambda lab: (rank.get(lab, len(rank)), pos[lab]))
        labels.append(tuple(labs))
        indices.append(tuple(pos[lab] for lab in labs))
    return RegionPartition(config, tuple(expected), tuple(labels), tuple(indices), layout.n_channels)


def apply_partition(p: RegionPartition, x) -> list:
    """Split ``x`` (..., channels, time) into per-region blocks (numpy or torch)."""
    if x.shape[-2] != p.n_channels:
        raise LayoutError(f"segment has {x.shape[-2]} channels, partition expects {p.n_channels}")
    out = []
    for idx in p.indices:
        if isinstance(x, np.ndarray):
            out.append(x[..., list(idx), :])
        else:
            import torch
            out.append(x.index_select(-2, torch.as_tensor(idx, device=x.device)))
    return out
