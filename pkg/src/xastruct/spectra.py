"""Sampled absorption spectra: containers, resampling, normalization, dataset I/O.

A spectrum is a plain pair (energy grid, mu values) tagged with enough
metadata to route it through the models: XANES or EXAFS, absorption edge,
absorber element, and the id of the structure it came from. Datasets are
kept on disk as one CSV per spectrum plus a JSON-lines manifest.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .crystal import DescriptorLabels, Element

XANES = "XANES"
EXAFS = "EXAFS"
KINDS = (XANES, EXAFS)
EDGES = ("K", "L")

DEFAULT_GRID_N = 100


class OutOfRangeError(ValueError):
    pass


class FlatSpectrumError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EnergyGrid:
    """Strictly increasing energy axis, in eV."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("energy grid needs at least two points")
        if not np.all(np.diff(v) > 0):
            raise ValueError("energy grid must be strictly increasing")

    @property
    def n(self) -> int:
        return int(self.values.size)

    @classmethod
    def linspace(cls, e_min: float, e_max: float, n: int = DEFAULT_GRID_N) -> "EnergyGrid":
        return cls(np.linspace(e_min, e_max, n))


@dataclass(frozen=True, eq=False)
class Spectrum:
    grid: EnergyGrid
    mu: np.ndarray
    kind: str
    edge: str
    absorber: Element
    structure_id: str = ""

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        object.__setattr__(self, "mu", mu)
        if mu.shape != (self.grid.n,):
            raise ValueError(f"mu length {mu.shape} does not match grid length {self.grid.n}")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu contains non-finite values")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.edge not in EDGES:
            raise ValueError(f"edge must be one of {EDGES}, got {self.edge!r}")

    def with_mu(self, mu) -> "Spectrum":
        return Spectrum(self.grid, mu, self.kind, self.edge, self.absorber, self.structure_id)


@dataclass(frozen=True)
class LabeledSample:
    """One absorbing site: its XANES spectrum, its EXAFS spectrum, and labels."""

    xanes: Spectrum
    exafs: Spectrum
    labels: DescriptorLabels

    def __post_init__(self):
        if self.xanes.kind != XANES or self.exafs.kind != EXAFS:
            raise ValueError("sample spectra must be (XANES, EXAFS) in that order")
        if self.xanes.absorber != self.exafs.absorber:
            raise ValueError("XANES and EXAFS absorbers differ")
        if self.xanes.structure_id != self.exafs.structure_id:
            raise ValueError("XANES and EXAFS structure ids differ")


def resample(sp: Spectrum, target: EnergyGrid) -> Spectrum:
    """Linear interpolation of mu onto ``target``; metadata carried over."""
    src = sp.grid.values
    if target.values[0] < src[0] or target.values[-1] > src[-1]:
        raise OutOfRangeError(
            f"target grid [{target.values[0]}, {target.values[-1]}] extends beyond "
            f"source [{src[0]}, {src[-1]}]"
        )
    mu = np.interp(target.values, src, sp.mu)
    return Spectrum(target, mu, sp.kind, sp.edge, sp.absorber, sp.structure_id)


def normalize_edge_jump(sp: Spectrum) -> Spectrum:
    """Scale mu so the pre-edge plateau sits at 0 and the post-edge tail at 1.

    Plateau levels are the means of the first and last 10% of points. A jump
    below 1e-9 means there is no edge to normalize to.
    """
    n_plateau = max(1, sp.grid.n // 10)
    pre_edge = float(np.mean(sp.mu[:n_plateau]))
    jump = float(np.mean(sp.mu[-n_plateau:])) - pre_edge
    if jump <= 1e-9:
        raise FlatSpectrumError(f"edge jump {jump:.3e} too small to normalize")
    return sp.with_mu((sp.mu - pre_edge) / jump)


def split_indices(n: int, seed: int) -> tuple:
    """Deterministic 80/20 shuffle-split of range(n). Train gets floor(0.8 n)."""
    if n < 5:
        raise InsufficientDataError(f"need at least 5 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(0.8 * n)
    return tuple(int(i) for i in order[:n_train]), tuple(int(i) for i in order[n_train:])


def split_dataset(samples, seed: int) -> tuple:
    train_idx, val_idx = split_indices(len(samples), seed)
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


# --- on-disk format -------------------------------------------------------
#
# One spectrum = <name>.csv with header "energy_ev,mu" plus <name>.json
# sidecar holding the metadata. A dataset = JSON-lines manifest, one
# LabeledSample per line with paths relative to the manifest's directory.


def save_spectrum(sp: Spectrum, csv_path) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["energy_ev", "mu"])
        for e, m in zip(sp.grid.values, sp.mu):
            writer.writerow([f"{e:.10g}", f"{m:.10g}"])
    sidecar = {
        "kind": sp.kind,
        "edge": sp.edge,
        "absorber": sp.absorber.symbol,
        "structure_id": sp.structure_id,
    }
    with open(csv_path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def load_spectrum(csv_path) -> Spectrum:
    csv_path = Path(csv_path)
    energies, mu = [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["energy_ev", "mu"]:
            raise ValueError(f"unexpected spectrum CSV header {header}")
        for row in reader:
            energies.append(float(row[0]))
            mu.append(float(row[1]))
    with open(csv_path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    return Spectrum(
        grid=EnergyGrid(np.array(energies)),
        mu=np.array(mu),
        kind=meta["kind"],
        edge=meta["edge"],
        absorber=Element.from_symbol(meta["absorber"]),
        structure_id=meta.get("structure_id", ""),
    )


def labels_to_dict(labels: DescriptorLabels) -> dict:
    return {
        "cn": labels.cn,
        "mnnd": labels.mnnd,
        "neighbor_type": labels.neighbor_type.symbol,
        "shell_distances": list(labels.shell_distances),
    }


def labels_from_dict(d: dict) -> DescriptorLabels:
    return DescriptorLabels(
        cn=int(d["cn"]),
        mnnd=float(d["mnnd"]),
        neighbor_type=Element.from_symbol(d["neighbor_type"]),
        shell_distances=tuple(d["shell_distances"]),
    )


def save_dataset(samples, manifest_path) -> None:
    """Write each sample's spectra as CSV pairs next to a JSON-lines manifest."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    root.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "w") as fh:
        for i, sample in enumerate(samples):
            xanes_rel = f"sample_{i:06d}_xanes.csv"
            exafs_rel = f"sample_{i:06d}_exafs.csv"
            save_spectrum(sample.xanes, root / xanes_rel)
            save_spectrum(sample.exafs, root / exafs_rel)
            record = {
                "xanes": xanes_rel,
                "exafs": exafs_rel,
                "labels": labels_to_dict(sample.labels),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_dataset(manifest_path) -> list:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    samples = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            samples.append(
                LabeledSample(
                    xanes=load_spectrum(root / record["xanes"]),
                    exafs=load_spectrum(root / record["exafs"]),
                    labels=labels_from_dict(record["labels"]),
                )
            )
    return samples
