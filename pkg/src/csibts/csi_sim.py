"""Synthetic two-room Wi-Fi channel simulator.

Generates amplitude CSI for a link with S subcarriers and K antenna pairs at a
fixed packet rate.  The channel is a sum of static multipath (fixed scatterers,
drawn once per scenario) and one slowly varying path per occupied room, plus
complex white noise:

    y[t, s, k] = | H_static[s, k] + sum_r coupling[k, r] * g_r(t) * e^{-j 2 pi f_s d_r} + w |

Each room has a fixed excess delay ``d_r``, so occupancy of room A and room B
ripple the frequency axis at different rates; that spectral signature is what
separates the two rooms, and it survives environment drift because the room
delays do not change between rounds.  ``g_r(t)`` is a complex
Ornstein-Uhlenbeck walk so presence shows up as slow temporal fading rather
than white noise.

Recording rounds are derived from a base scenario by perturbing the static
geometry: ``none`` applies day-to-day jitter, ``mild`` rescales path gains
(furniture moved), ``severe`` redraws all path delays (antenna repositioned).

Identical (scenario, seed) pairs produce bit-identical datasets.
"""
from __future__ import annotations

import dataclasses
import json
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUBCARRIER_SPACING = 312.5e3  # Hz, 20 MHz OFDM grid

#: packets for case c are generated with rooms CASE_ROOMS[c] occupied
CASE_ROOMS = {1: (), 2: ("A",), 3: ("B",), 4: ("A", "B")}
CASES = (1, 2, 3, 4)

#: per-room excess delay of the person-induced path, seconds.  Room A ripples
#: the 56-subcarrier band slowly (~once), room B about three times.
ROOM_DELAYS = {"A": 60e-9, "B": 180e-9}

#: per-room correlation time of the motion-induced gain walk, seconds.  Room A
#: hosts slower weak motion, room B faster strong motion, so the four cases
#: sit at distinct disarray levels and the rooms differ in temporal texture.
ROOM_TCORR = {"A": 1.4, "B": 0.5}

DRIFT_PROFILES = ("none", "mild", "severe")

# Day-to-day jitter applied to every derived round.  The per-pair rotation
# leaves |H_static| (and so the mean amplitude profile) intact but re-phases
# the presence ripple against the static pattern, which is what makes models
# fit to a single round generalize poorly to the next one.
JITTER_PAIR_PHASE_STD = 0.8    # radians, one rotation per antenna pair
JITTER_DELAY_STD = 1e-9        # seconds, per path
JITTER_PHASE_STD = 0.08        # radians, per path per pair
JITTER_GAIN_STD = 0.03         # relative magnitude, per path per pair


class DataFormatError(ValueError):
    """A dataset directory is malformed or inconsistent with its meta header."""


class ChecksumMismatchWarning(UserWarning):
    """Stored payload checksum does not match the meta header."""


def room_coupling(room: str, k_antennas: int) -> np.ndarray:
    """Fixed complex antenna-pair pattern of a room's dynamic path, shape (K,).

    Patterns are design constants (not seeded) so the spatial signature of
    each room is stable across scenarios and rounds.
    """
    k = np.arange(k_antennas)
    if room == "A":
        # strong enough that the combined case stays separable from room B
        # alone in disarray; room B still dominates the temporal texture
        amp = np.linspace(1.15, 0.65, k_antennas)
        phase = 2.0 * np.pi * k / k_antennas
    elif room == "B":
        amp = np.linspace(1.3, 0.7, k_antennas)
        phase = np.pi / 3.0 + 4.0 * np.pi * k / k_antennas
    else:
        raise ValueError(f"unknown room {room!r}")
    return amp * np.exp(1j * phase)


@dataclass(frozen=True, eq=False)
class ChannelScenario:
    """Static geometry and noise configuration for one recording round."""

    num_paths: int
    static_gains: np.ndarray        # (K, num_paths) complex gain per path per pair
    static_delays: np.ndarray       # (num_paths,) seconds
    presence_rooms: tuple[str, ...]
    dynamic_gain_scale: float
    drift_profile: str
    noise_std: float
    seed: int
    n_subcarriers: int = 56
    n_pairs: int = 4
    sample_rate: float = 10.0       # packets per second

    def __post_init__(self):
        if self.static_gains.shape != (self.n_pairs, self.num_paths):
            raise ValueError(
                f"static_gains shape {self.static_gains.shape} does not match "
                f"(n_pairs, num_paths)=({self.n_pairs}, {self.num_paths})")
        if self.static_delays.shape != (self.num_paths,):
            raise ValueError("static_delays must have one entry per path")
        if self.drift_profile not in DRIFT_PROFILES:
            raise ValueError(f"drift_profile must be one of {DRIFT_PROFILES}")


@dataclass
class CsiDataset:
    """One recording round of amplitude CSI.

    ``labels`` carries the per-packet presence case.  Rounds used as unlabeled
    training data keep their labels on disk; training simply does not read
    them, while evaluation does.
    """

    amplitudes: np.ndarray          # (T, S, K) float32 linear amplitude
    labels: np.ndarray              # (T,) uint8 case ids in 1..4
    round_id: int
    sample_rate: float
    segments: list[tuple[int, int, int]]   # (start, end, case), end exclusive
    environment_tag: str = ""
    seed: int = 0

    @property
    def n_packets(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return self.amplitudes.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.amplitudes.shape[2]


def _static_response(scenario: ChannelScenario) -> np.ndarray:
    """Frequency response of the static paths, shape (S, K) complex."""
    freqs = np.arange(scenario.n_subcarriers) * SUBCARRIER_SPACING
    steer = np.exp(-2j * np.pi * np.outer(scenario.static_delays, freqs))  # (P, S)
    return (scenario.static_gains @ steer).T


def base_scenario(seed: int, *, n_subcarriers: int = 56, n_pairs: int = 4,
                  num_paths: int = 6, dynamic_gain_scale: float = 0.35,
                  noise_std: float = 0.05, sample_rate: float = 10.0) -> ChannelScenario:
    """Draw the static multipath geometry of a deployment site.

    Gains decay with path delay and are normalized so the static response has
    unit RMS over the (subcarrier, pair) grid, which keeps ``noise_std`` and
    ``dynamic_gain_scale`` meaningful as relative levels.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C3]))
    delays = np.sort(rng.uniform(10e-9, 250e-9, num_paths))
    gains = (rng.standard_normal((n_pairs, num_paths))
             + 1j * rng.standard_normal((n_pairs, num_paths))) / np.sqrt(2.0)
    gains *= np.exp(-delays / 200e-9)
    scenario = ChannelScenario(
        num_paths=num_paths, static_gains=gains, static_delays=delays,
        presence_rooms=(), dynamic_gain_scale=dynamic_gain_scale,
        drift_profile="none", noise_std=noise_std, seed=seed,
        n_subcarriers=n_subcarriers, n_pairs=n_pairs, sample_rate=sample_rate)
    rms = np.sqrt(np.mean(np.abs(_static_response(scenario)) ** 2))
    return dataclasses.replace(scenario, static_gains=gains / rms)


def derive_round(base: ChannelScenario, drift_profile: str, round_seed: int) -> ChannelScenario:
    """Perturb a base scenario into the geometry of one recording round.

    ``none`` jitters delays, phases and gain magnitudes (day-to-day change),
    ``mild`` additionally rescales each path gain by a factor in [0.8, 1.2],
    and ``severe`` redraws every static delay, destroying the interference
    pattern the way repositioning an antenna does.
    """
    if drift_profile not in DRIFT_PROFILES:
        raise ValueError(f"drift_profile must be one of {DRIFT_PROFILES}")
    rng = np.random.default_rng(
        np.random.SeedSequence([base.seed, round_seed, DRIFT_PROFILES.index(drift_profile)]))
    delays = base.static_delays + rng.normal(0.0, JITTER_DELAY_STD, base.num_paths)
    pair_rot = rng.normal(0.0, JITTER_PAIR_PHASE_STD, base.n_pairs)
    gains = base.static_gains * np.exp(1j * (
        pair_rot[:, None] + rng.normal(0.0, JITTER_PHASE_STD, base.static_gains.shape)))
    gains = gains * (1.0 + rng.normal(0.0, JITTER_GAIN_STD, gains.shape))
    if drift_profile == "mild":
        gains = gains * rng.uniform(0.8, 1.2, base.num_paths)[None, :]
    elif drift_profile == "severe":
        delays = np.sort(rng.uniform(10e-9, 250e-9, base.num_paths))
        gains = (rng.standard_normal(gains.shape)
                 + 1j * rng.standard_normal(gains.shape)) / np.sqrt(2.0)
        gains *= np.exp(-delays / 200e-9)
    derived = dataclasses.replace(
        base, static_gains=gains, static_delays=np.clip(delays, 1e-9, None),
        drift_profile=drift_profile, seed=round_seed)
    if drift_profile == "severe":
        # renormalize so the redrawn geometry keeps the base amplitude scale
        rms = np.sqrt(np.mean(np.abs(_static_response(derived)) ** 2))
        derived = dataclasses.replace(derived, static_gains=gains / rms)
    return derived


def _ou_walk(rng: np.random.Generator, n: int, dt: float, t_corr: float = 0.8) -> np.ndarray:
    """Unit-variance stationary complex Ornstein-Uhlenbeck series, shape (n,)."""
    phi = np.exp(-dt / t_corr)
    innov = np.sqrt(1.0 - phi * phi)
    steps = (rng.standard_normal((n, 2)) @ np.array([1.0, 1j])) / np.sqrt(2.0)
    g = np.empty(n, dtype=np.complex128)
    g[0] = steps[0]
    for t in range(1, n):
        g[t] = phi * g[t - 1] + innov * steps[t]
    return g


def simulate_round(scenario: ChannelScenario, n_packets: int, case: int | None = None,
                   round_id: int = 0, environment_tag: str = "") -> CsiDataset:
    """Simulate one contiguous segment of packets under a single presence case.

    ``case=None`` infers the case from ``scenario.presence_rooms``.  Noise and
    room walks are seeded per (scenario seed, case), so segments of different
    cases are independent realizations.
    """
    if case is None:
        case = next(c for c, rooms in CASE_ROOMS.items()
                    if set(rooms) == set(scenario.presence_rooms))
    if case not in CASE_ROOMS:
        raise ValueError(f"case must be in {sorted(CASE_ROOMS)}, got {case}")
    rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, 0xD47A, case]))
    freqs = np.arange(scenario.n_subcarriers) * SUBCARRIER_SPACING
    y = np.broadcast_to(_static_response(scenario), (n_packets,) + (
        scenario.n_subcarriers, scenario.n_pairs)).astype(np.complex128)
    for room in sorted(CASE_ROOMS[case]):
        walk = scenario.dynamic_gain_scale * _ou_walk(
            rng, n_packets, 1.0 / scenario.sample_rate, ROOM_TCORR[room])
        steer = np.exp(-2j * np.pi * freqs * ROOM_DELAYS[room])
        coupling = room_coupling(room, scenario.n_pairs)
        y = y + walk[:, None, None] * steer[None, :, None] * coupling[None, None, :]
    if scenario.noise_std > 0.0:
        noise = rng.standard_normal((n_packets, scenario.n_subcarriers, scenario.n_pairs, 2))
        y = y + scenario.noise_std * (noise[..., 0] + 1j * noise[..., 1]) / np.sqrt(2.0)
    return CsiDataset(
        amplitudes=np.abs(y).astype(np.float32),
        labels=np.full(n_packets, case, dtype=np.uint8),
        round_id=round_id, sample_rate=scenario.sample_rate,
        segments=[(0, n_packets, case)],
        environment_tag=environment_tag, seed=scenario.seed)


def generate_round(scenario: ChannelScenario, packets_per_case: int, round_id: int,
                   environment_tag: str = "") -> CsiDataset:
    """Simulate all four cases back to back into one round dataset."""
    parts = [simulate_round(scenario, packets_per_case, case) for case in CASES]
    segments = []
    offset = 0
    for part, case in zip(parts, CASES):
        segments.append((offset, offset + part.n_packets, case))
        offset += part.n_packets
    return CsiDataset(
        amplitudes=np.concatenate([p.amplitudes for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        round_id=round_id, sample_rate=scenario.sample_rate,
        segments=segments, environment_tag=environment_tag, seed=scenario.seed)


# ---------------------------------------------------------------------------
# on-disk format: a directory with a JSON `meta` header and raw `csi.f32`
# little-endian float32 payload in (T, S, K) row-major order
# ---------------------------------------------------------------------------

def write_dataset(dataset: CsiDataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(dataset.amplitudes, dtype="<f4").tobytes()
    meta = {
        "schema_version": 1,
        "round_id": dataset.round_id,
        "n_packets": dataset.n_packets,
        "n_subcarriers": dataset.n_subcarriers,
        "n_pairs": dataset.n_pairs,
        "sample_rate": dataset.sample_rate,
        "environment_tag": dataset.environment_tag,
        "seed": dataset.seed,
        "segments": [list(seg) for seg in dataset.segments],
        "dtype": "<f4",
        "checksum": f"crc32:{zlib.crc32(payload):08x}",
    }
    (path / "csi.f32").write_bytes(payload)
    (path / "meta").write_text(json.dumps(meta, indent=2) + "\n")


def labels_from_segments(segments, n_packets: int) -> np.ndarray:
    labels = np.zeros(n_packets, dtype=np.uint8)
    for start, end, case in segments:
        labels[start:end] = case
    return labels


def read_dataset(path: str | Path) -> CsiDataset:
    """Load a dataset directory, validating shape and flagging corruption.

    A payload whose size disagrees with the meta header raises
    ``DataFormatError`` naming both; a checksum mismatch on a well-shaped
    payload only warns, so bit-flip corruption is visible but recoverable.
    """
    path = Path(path)
    meta_path, payload_path = path / "meta", path / "csi.f32"
    if not meta_path.is_file() or not payload_path.is_file():
        raise DataFormatError(f"{path} is not a dataset directory (need meta and csi.f32)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{meta_path}: malformed meta header: {exc}") from exc
    shape = (meta["n_packets"], meta["n_subcarriers"], meta["n_pairs"])
    payload = payload_path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise DataFormatError(
            f"{payload_path}: meta shape {shape} implies {expected} bytes, "
            f"file holds {len(payload)}")
    stored = meta.get("checksum", "")
    actual = f"crc32:{zlib.crc32(payload):08x}"
    if stored and stored != actual:
        warnings.warn(
            f"{payload_path}: checksum {actual} does not match meta {stored}",
            ChecksumMismatchWarning, stacklevel=2)
    amplitudes = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    segments = [tuple(seg) for seg in meta["segments"]]
    return CsiDataset(
        amplitudes=amplitudes,
        labels=labels_from_segments(segments, shape[0]),
        round_id=meta["round_id"], sample_rate=meta["sample_rate"],
        segments=segments, environment_tag=meta.get("environment_tag", ""),
        seed=meta.get("seed", 0))
