"""Command-line front end.

Typical workflow::

    wavefield dict layout em32 em32.json
    wavefield dict build-sphere --geometry em32.json --radius 0.042 em32.wfd
    wavefield dict build-freefield --geometry target.json target.wfd
    wavefield noise --seconds 10 --seed 1 source.wav
    wavefield sim room.json em32.json source.wav capture.wav --rigid-sphere 0.042
    wavefield decompose capture.wav em32.wfd -o room.tfm
    wavefield synth room.tfm target.wfd synth.wav
    wavefield rir estimate source.wav synth.wav -o target.rir

Exit codes: 0 success, 2 invalid arguments, 3 unreadable/corrupt files,
4 incompatible inputs (dimensions, grids), 5 no usable signal.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio import AudioFileError, read_wav, write_wav
from .coregeo import SPEED_OF_SOUND, ArrayGeometry, FrequencyGrid
from .dictionary import (DeviceDictionary, DictionaryFileError, SphereSpec, build_free_field, build_rigid_sphere,
                         default_bins, em32_sphere, equiangular_grid, load_dictionary, save_dictionary)
from .pwd import DecompositionConfig, MapFileError, goa_sweep, load_map, save_map
from .rir import (RirFileError, accumulate, apply_rir, estimate_rir, load_transfer_function,
                  save_transfer_function, to_impulse_response)
from .roomsim import RoomSpec, simulate_capture, simulate_sphere_capture
from .stft import StftConfig, istft, stft
from .synthesis import add_noise, synthesize_field

log = logging.getLogger("wavefield")

EXIT_USAGE = 2
EXIT_FILE = 3
EXIT_MISMATCH = 4
EXIT_SIGNAL = 5

GOA_BANDS = ((50, 500), (500, 1000), (1000, 2000), (2000, 4000), (4000, 8000))


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _file_error(exc: Exception) -> CliError:
    return CliError(str(exc), EXIT_FILE)


def _load_geometry(path) -> ArrayGeometry:
    try:
        return ArrayGeometry.load(path)
    except OSError as exc:
        raise _file_error(exc)
    except ValueError as exc:
        raise CliError(f"{path}: invalid geometry: {exc}", EXIT_FILE)


def _load_dict(path) -> DeviceDictionary:
    try:
        return load_dictionary(path)
    except (OSError, DictionaryFileError) as exc:
        raise _file_error(exc)


def _load_wav(path):
    try:
        return read_wav(path)
    except (OSError, AudioFileError) as exc:
        raise _file_error(exc)


def _parse_range(text: str):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW:HIGH in Hz, got {text!r}")
    if not 0 <= lo <= hi:
        raise argparse.ArgumentTypeError("need 0 <= LOW <= HIGH")
    return lo, hi


# ---------------------------------------------------------------------------
# dict
# ---------------------------------------------------------------------------


def _freq_setup(args):
    if args.fft_size < 2 or args.fft_size % 2:
        raise CliError("--fft-size must be even", EXIT_USAGE)
    freqs = FrequencyGrid(args.sample_rate, args.fft_size, args.speed_of_sound)
    return freqs, default_bins(freqs, args.max_freq)


def cmd_dict(args) -> int:
    if args.dict_cmd == "info":
        d = _load_dict(args.path)
        F, L, M = d.shape
        f = d.bin_freqs
        print(f"device        {d.metadata.get('device', '?')}")
        print(f"builder       {d.builder}")
        print(f"microphones   {M}")
        print(f"directions    {L} ({d.grid.scheme})")
        print(f"bins          {F} of {d.freqs.num_bins} ({f[0]:.1f} - {f[-1]:.1f} Hz)")
        print(f"sample rate   {d.freqs.sample_rate:g} Hz, fft size {d.freqs.fft_size}")
        if d.metadata.get("radius"):
            print(f"radius        {d.metadata['radius']:g} m")
        return 0
    if args.dict_cmd == "layout":
        em32_sphere(args.radius).geometry.save(args.out)
        return 0

    geom = _load_geometry(args.geometry)
    freqs, bins = _freq_setup(args)
    grid = equiangular_grid(args.grid_step)
    if args.dict_cmd == "build-freefield":
        d = build_free_field(geom, grid, freqs, bins, name=args.name or Path(args.out).stem)
    else:
        spec = SphereSpec.from_geometry(geom, args.radius)
        try:
            d = build_rigid_sphere(spec, grid, freqs, bins, name=args.name or Path(args.out).stem, jobs=args.jobs)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_USAGE)
    save_dictionary(d, args.out)
    log.info("wrote %s: F=%d L=%d M=%d", args.out, *d.shape)
    return 0


# ---------------------------------------------------------------------------
# decompose / synth
# ---------------------------------------------------------------------------


def _stft_for(d: DeviceDictionary, rate: int, hop: int) -> StftConfig:
    if not math.isclose(rate, d.freqs.sample_rate):
        raise CliError(f"capture sample rate {rate} Hz differs from dictionary {d.freqs.sample_rate:g} Hz",
                       EXIT_MISMATCH)
    try:
        return StftConfig(d.freqs.fft_size, hop or d.freqs.fft_size // 2, "hann", float(rate))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE)


def cmd_decompose(args) -> int:
    d = _load_dict(args.dictionary)
    rate, x = _load_wav(args.capture)
    if x.shape[1] != d.num_mics:
        raise CliError(f"capture has {x.shape[1]} channels, dictionary has {d.num_mics} microphones", EXIT_MISMATCH)
    cfg = _stft_for(d, rate, args.hop)
    if x.shape[0] < cfg.frame_size:
        raise CliError("capture is shorter than one STFT frame", EXIT_SIGNAL)
    try:
        dcfg = DecompositionConfig(args.max_atoms, args.stop_db, bin_range=args.bins)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE)
    spec = stft(x, cfg)
    if not np.any(spec.data):
        raise CliError("no signal energy in capture", EXIT_SIGNAL)
    ks = list(range(1, dcfg.max_atoms + 1)) if args.k_sweep else [dcfg.max_atoms]
    try:
        tfm, reports = goa_sweep(spec, d, dcfg, ks, jobs=args.jobs)
    except ValueError as exc:
        msg = str(exc)
        raise CliError(msg, EXIT_SIGNAL if "energy" in msg else EXIT_MISMATCH)
    save_map(tfm, args.output)
    report = reports[dcfg.max_atoms]
    print("band_hz,goa_db")
    for lo, hi in GOA_BANDS:
        try:
            print(f"{lo}-{hi},{report.band_db(lo, hi):.2f}")
        except ValueError:
            continue
    print(f"all,{report.aggregate_db:.2f}")
    if args.k_sweep:
        print()
        print("k,goa_db")
        for k in ks:
            print(f"{k},{reports[k].aggregate_db:.2f}")
    return 0


def _load_noise(path, field_shape, cfg: StftConfig):
    if str(path).endswith(".tfm"):
        try:
            return load_map(path)
        except (OSError, MapFileError) as exc:
            raise _file_error(exc)
    rate, n = _load_wav(path)
    if not math.isclose(rate, cfg.sample_rate):
        raise CliError("noise sample rate differs from the map", EXIT_MISMATCH)
    need = cfg.signal_length(field_shape[0])
    n = n[:need] if n.shape[0] >= need else np.pad(n, ((0, need - n.shape[0]), (0, 0)))
    return stft(n, cfg)


def cmd_synth(args) -> int:
    try:
        tfm = load_map(args.map)
    except (OSError, MapFileError) as exc:
        raise _file_error(exc)
    d = _load_dict(args.dictionary)
    if tfm.grid_hash != d.grid.content_hash:
        raise CliError("map and target dictionary use different direction grids", EXIT_MISMATCH)
    try:
        field = synthesize_field(tfm, d)
        if args.noise:
            noise = _load_noise(args.noise, field.data.shape, tfm.stft_config)
            field = add_noise(field, noise, args.noise_gain, d)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_MISMATCH)
    write_wav(args.out, tfm.stft_config.sample_rate, istft(field))
    return 0


# ---------------------------------------------------------------------------
# rir
# ---------------------------------------------------------------------------


def cmd_rir(args) -> int:
    if args.rir_cmd == "estimate":
        rate_x, x = _load_wav(args.source)
        rate_y, y = _load_wav(args.capture)
        if rate_x != rate_y:
            raise CliError("source and capture sample rates differ", EXIT_MISMATCH)
        if x.shape[1] != 1:
            raise CliError("source must be mono", EXIT_MISMATCH)
        try:
            cfg = StftConfig(args.frame_size, args.frame_size // 2, "hann", float(rate_x))
        except ValueError as exc:
            raise CliError(str(exc), EXIT_USAGE)
        n = min(x.shape[0], y.shape[0])
        if n < cfg.frame_size:
            raise CliError("signals are shorter than one frame", EXIT_SIGNAL)
        cross = accumulate(None, stft(x[:n], cfg), stft(y[:n], cfg))
        try:
            tf = estimate_rir(cross, args.eps)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_SIGNAL)
        save_transfer_function(tf, args.output)
        return 0

    try:
        tf = load_transfer_function(args.rir)
    except (OSError, RirFileError) as exc:
        raise _file_error(exc)
    if args.rir_cmd == "export":
        length = args.length or tf.config.frame_size
        if length > tf.config.frame_size:
            raise CliError(f"--length exceeds the FFT size {tf.config.frame_size}", EXIT_USAGE)
        write_wav(args.out, tf.config.sample_rate, to_impulse_response(tf, length).T)
        return 0

    rate, u = _load_wav(args.source)
    if not math.isclose(rate, tf.config.sample_rate):
        raise CliError("source sample rate differs from the transfer function", EXIT_MISMATCH)
    if u.shape[1] != 1:
        raise CliError("source must be mono", EXIT_MISMATCH)
    if u.shape[0] < tf.config.frame_size:
        raise CliError("source is shorter than one frame", EXIT_SIGNAL)
    write_wav(args.out, rate, istft(apply_rir(tf, stft(u, tf.config))))
    return 0


# ---------------------------------------------------------------------------
# sim / noise
# ---------------------------------------------------------------------------


def cmd_sim(args) -> int:
    try:
        room = RoomSpec.load(args.room)
    except OSError as exc:
        raise _file_error(exc)
    except (ValueError, TypeError) as exc:
        raise CliError(f"{args.room}: invalid room: {exc}", EXIT_FILE)
    geom = _load_geometry(args.geometry)
    rate, src = _load_wav(args.source)
    if not math.isclose(rate, room.sample_rate):
        raise CliError(f"source sample rate {rate} differs from room sample rate {room.sample_rate:g}", EXIT_MISMATCH)
    if src.shape[1] != 1:
        raise CliError("source must be mono", EXIT_MISMATCH)
    length = src.shape[0] if args.same_length else None
    try:
        if args.rigid_sphere:
            out = simulate_sphere_capture(room, SphereSpec.from_geometry(geom, args.rigid_sphere), src[:, 0], length)
        else:
            out = simulate_capture(room, geom, src[:, 0], length)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_MISMATCH)
    if args.sensor_noise_db is not None:
        rng = np.random.default_rng(args.seed)
        rms = np.sqrt(np.mean(out ** 2))
        out = out + rng.standard_normal(out.shape) * rms * 10 ** (args.sensor_noise_db / 20)
    write_wav(args.out, room.sample_rate, out)
    return 0


def cmd_noise(args) -> int:
    rng = np.random.default_rng(args.seed)
    n = int(round(args.seconds * args.sample_rate))
    if n < 1:
        raise CliError("--seconds too short", EXIT_USAGE)
    write_wav(args.out, args.sample_rate, args.amplitude * rng.standard_normal(n))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavefield", description="Sound-field synthesis with plane-wave dictionaries.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pd = sub.add_parser("dict", help="build or inspect device dictionaries (.wfd)")
    dsub = pd.add_subparsers(dest="dict_cmd", required=True)
    for name in ("build-sphere", "build-freefield"):
        b = dsub.add_parser(name)
        b.add_argument("out")
        b.add_argument("--geometry", required=True, help="array geometry JSON")
        if name == "build-sphere":
            b.add_argument("--radius", type=float, default=None,
                           help="sphere radius in m (default: mean microphone distance)")
        b.add_argument("--sample-rate", type=float, default=16000.0)
        b.add_argument("--fft-size", type=int, default=1024)
        b.add_argument("--max-freq", type=float, default=8000.0)
        b.add_argument("--speed-of-sound", type=float, default=SPEED_OF_SOUND)
        b.add_argument("--grid-step", type=float, default=10.0, help="equiangular grid step in degrees")
        b.add_argument("--name")
        b.add_argument("--jobs", type=int, default=1)
    i = dsub.add_parser("info")
    i.add_argument("path")
    lay = dsub.add_parser("layout", help="write a built-in array layout as geometry JSON")
    lay.add_argument("layout", choices=["em32"])
    lay.add_argument("out")
    lay.add_argument("--radius", type=float, default=0.042)

    dc = sub.add_parser("decompose", help="plane-wave decomposition of a capture")
    dc.add_argument("capture")
    dc.add_argument("dictionary")
    dc.add_argument("-o", "--output", required=True, help="output .tfm map")
    dc.add_argument("--max-atoms", type=int, default=30)
    dc.add_argument("--stop-db", type=float, default=-30.0)
    dc.add_argument("--bins", type=_parse_range, default=(50.0, 8000.0), metavar="LOW:HIGH")
    dc.add_argument("--hop", type=int, default=0, help="STFT hop (default: half the FFT size)")
    dc.add_argument("--k-sweep", action="store_true", help="also print GoA for K = 1..max-atoms")
    dc.add_argument("--jobs", type=int, default=1)

    sy = sub.add_parser("synth", help="render a map through a target dictionary")
    sy.add_argument("map")
    sy.add_argument("dictionary")
    sy.add_argument("out")
    sy.add_argument("--noise", help="noise .tfm map or target-device WAV")
    sy.add_argument("--noise-gain", type=float, default=1.0)

    pr = sub.add_parser("rir", help="transfer-function estimation and use")
    rsub = pr.add_subparsers(dest="rir_cmd", required=True)
    e = rsub.add_parser("estimate")
    e.add_argument("source")
    e.add_argument("capture")
    e.add_argument("-o", "--output", required=True)
    e.add_argument("--frame-size", type=int, default=4096)
    e.add_argument("--eps", type=float, default=1e-6)
    a = rsub.add_parser("apply")
    a.add_argument("rir")
    a.add_argument("source")
    a.add_argument("out")
    x = rsub.add_parser("export")
    x.add_argument("rir")
    x.add_argument("out")
    x.add_argument("--length", type=int, default=0)

    sm = sub.add_parser("sim", help="image-source simulation of an array capture")
    sm.add_argument("room")
    sm.add_argument("geometry")
    sm.add_argument("source")
    sm.add_argument("out")
    sm.add_argument("--rigid-sphere", type=float, default=0.0, metavar="RADIUS",
                    help="mount the microphones on a rigid sphere of this radius")
    sm.add_argument("--same-length", action="store_true", help="truncate output to the source length")
    sm.add_argument("--sensor-noise-db", type=float, default=None, help="add white noise relative to capture RMS")
    sm.add_argument("--seed", type=int, default=0)

    nz = sub.add_parser("noise", help="write a white-noise excitation")
    nz.add_argument("out")
    nz.add_argument("--seconds", type=float, default=10.0)
    nz.add_argument("--sample-rate", type=float, default=16000.0)
    nz.add_argument("--amplitude", type=float, default=0.1)
    nz.add_argument("--seed", type=int, default=0)
    return p


COMMANDS = {"dict": cmd_dict, "decompose": cmd_decompose, "synth": cmd_synth, "rir": cmd_rir,
            "sim": cmd_sim, "noise": cmd_noise}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("wavefield: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"wavefield: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
