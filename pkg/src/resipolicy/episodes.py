"""Episode container, NDJSON codec, and dataset directory IO.

File format: line 1 is a JSON header
``{"version":1,"task_id":...,"seed":...,"obs_hz":10,"wrench_hz":60,"H":...}``;
every following line is ``{"t":...,"kind":"obs"|"action"|"wrench"|"residual",
"data":[...]}`` where ``t`` is printed as a plain decimal with at least 9
fractional digits. Encoding is exact: decode(encode(e)) reproduces every
field bit for bit.
"""
from __future__ import annotations

import dataclasses
import decimal
import hashlib
import json
import pathlib

import numpy as np

from .core import (
    OBS_HZ,
    WRENCH_HZ,
    WRENCH_PER_STEP,
    AlignmentError,
    CodecError,
    Normalizer,
    Pose7,
    TokenSet,
    Wrench,
)

EPISODE_VERSION = 1
_KIND_ORDER = {"obs": 0, "action": 1, "wrench": 2, "residual": 3}


@dataclasses.dataclass(eq=False)
class Episode:
    """Multi-rate recording of one task execution.

    obs/action streams are sampled at 10 Hz, the wrench stream at 60 Hz
    (exactly 6 samples per action step). residual_stream is optional and
    only present in residual-target datasets; entries are (t, 7-vector).
    """

    obs_stream: list
    action_stream: list
    wrench_stream: list
    task_id: str
    seed: int
    horizon: int = 8
    residual_stream: list = dataclasses.field(default_factory=list)

    def validate(self):
        if len(self.obs_stream) != len(self.action_stream):
            raise AlignmentError(
                f"{len(self.obs_stream)} observations vs "
                f"{len(self.action_stream)} actions"
            )
        expected = WRENCH_PER_STEP * len(self.action_stream)
        if len(self.wrench_stream) != expected:
            raise AlignmentError(
                f"expected {expected} wrench samples for "
                f"{len(self.action_stream)} action steps, got {len(self.wrench_stream)}"
            )
        ts = [w.timestamp for w in self.wrench_stream]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise CodecError("wrench timestamps are not strictly increasing")
        return self

    def n_steps(self):
        return len(self.action_stream)

    def action_time(self, i):
        return i / OBS_HZ

    def action_matrix(self):
        return np.stack([p.as_array() for p in self.action_stream]) if self.action_stream else np.zeros((0, 7))

    def wrench_matrix(self):
        return np.stack([w.as_array() for w in self.wrench_stream]) if self.wrench_stream else np.zeros((0, 6))


def _format_time(t):
    """Decimal form with >= 9 fractional digits that parses back exactly."""
    s = repr(float(t))
    if "e" in s or "E" in s:
        s = format(decimal.Decimal(s), "f")
    if "." not in s:
        s += "."
    head, frac = s.split(".")
    if len(frac) < 9:
        frac = frac.ljust(9, "0")
    return f"{head}.{frac}"


def _record_line(t, kind, data):
    payload = json.dumps(data, separators=(",", ":"))
    return f'{{"t":{_format_time(t)},"kind":"{kind}","data":{payload}}}'


def encode_episode(e: Episode) -> bytes:
    e.validate()
    header = {
        "version": EPISODE_VERSION,
        "task_id": e.task_id,
        "seed": e.seed,
        "obs_hz": OBS_HZ,
        "wrench_hz": WRENCH_HZ,
        "H": e.horizon,
    }
    records = []
    for i, ts in enumerate(e.obs_stream):
        data = [
            ts.visual_tokens.tolist(),
            ts.tactile_tokens.tolist(),
            ts.proprio.tolist(),
            ts.wrench.tolist(),
        ]
        records.append((ts.timestamp, _KIND_ORDER["obs"], _record_line(ts.timestamp, "obs", data)))
    for i, pose in enumerate(e.action_stream):
        t = e.action_time(i)
        records.append((t, _KIND_ORDER["action"], _record_line(t, "action", pose.as_array().tolist())))
    for w in e.wrench_stream:
        records.append((w.timestamp, _KIND_ORDER["wrench"], _record_line(w.timestamp, "wrench", w.as_array().tolist())))
    for t, vec in e.residual_stream:
        records.append((t, _KIND_ORDER["residual"], _record_line(t, "residual", np.asarray(vec).tolist())))
    records.sort(key=lambda r: (r[0], r[1]))
    lines = [json.dumps(header, separators=(",", ":"))]
    lines.extend(r[2] for r in records)
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_episode(blob: bytes) -> Episode:
    text = blob.decode("utf-8")
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise CodecError("empty episode file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CodecError(f"malformed header: {exc}") from exc
    if header.get("version") != EPISODE_VERSION:
        raise CodecError(f"unsupported episode version {header.get('version')!r}")
    for key in ("task_id", "seed", "obs_hz", "wrench_hz", "H"):
        if key not in header:
            raise CodecError(f"header is missing {key!r}")
    obs, actions, wrenches, residuals = [], [], [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(ln)
            t = float(rec["t"])
            kind = rec["kind"]
            data = rec["data"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CodecError(f"malformed record on line {lineno}: {exc}") from exc
        if kind == "obs":
            try:
                visual, tactile, proprio, wrench = data
            except ValueError as exc:
                raise CodecError(f"malformed obs record on line {lineno}") from exc
            obs.append(TokenSet(np.asarray(visual), np.asarray(tactile), np.asarray(proprio), np.asarray(wrench), t))
        elif kind == "action":
            if len(data) != 7:
                raise CodecError(f"action record on line {lineno} has {len(data)} values")
            actions.append(Pose7.from_array(np.asarray(data)))
        elif kind == "wrench":
            if len(data) != 6:
                raise CodecError(f"wrench record on line {lineno} has {len(data)} values")
            wrenches.append(Wrench.from_array(np.asarray(data), t))
        elif kind == "residual":
            if len(data) != 7:
                raise CodecError(f"residual record on line {lineno} has {len(data)} values")
            residuals.append((t, np.asarray(data, dtype=np.float64)))
        else:
            raise CodecError(f"unknown record kind {kind!r} on line {lineno}")
    ep = Episode(
        obs_stream=obs,
        action_stream=actions,
        wrench_stream=wrenches,
        task_id=header["task_id"],
        seed=int(header["seed"]),
        horizon=int(header["H"]),
        residual_stream=residuals,
    )
    return ep.validate()


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def save_dataset(dirpath, episodes, normalizer: Normalizer, extra_meta=None):
    """Write episode files plus manifest.json (file list + normalizer)."""
    dirpath = pathlib.Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    files = []
    for i, ep in enumerate(episodes):
        name = f"episode_{i:04d}.ndjson"
        (dirpath / name).write_bytes(encode_episode(ep))
        files.append(name)
    manifest = {"files": files, "normalizer": normalizer.to_dict()}
    manifest.update(extra_meta or {})
    (dirpath / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return dirpath


def load_dataset(dirpath):
    dirpath = pathlib.Path(dirpath)
    manifest = json.loads((dirpath / "manifest.json").read_text())
    episodes = [decode_episode((dirpath / name).read_bytes()) for name in manifest["files"]]
    normalizer = Normalizer.from_dict(manifest["normalizer"])
    return episodes, normalizer, manifest


def dataset_hash(dirpath) -> str:
    """Order-independent content hash of a dataset directory."""
    dirpath = pathlib.Path(dirpath)
    h = hashlib.sha256()
    for path in sorted(dirpath.iterdir()):
        if path.is_file():
            h.update(path.name.encode())
            h.update(bytes.fromhex(sha256_file(path)))
    return h.hexdigest()
