"""Command-line interface: ``ddsp-vocoder <subcommand> ...``.

Subcommands: analyze, synth, resynth, train, bench, count-params, gradcheck.
Exit status is 0 on success and 1 on any error (including bad arguments).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import glob
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import edits as ed
from . import gradsuite
from .audio import SAMPLE_RATE, AudioBuffer, read_wav, write_wav
from .decoder import DecoderConfig, decode, init, load_params, param_count
from .errors import VocoderError
from .signals import speechlike
from .spectral import DEFAULT_ALPHA, FMAX, FMIN, N_MELS, RESOLUTIONS, MelConfig, mel_spectrogram, write_mel_csv
from .synth import N_HARMONICS, N_NOISE_BINS, UPSAMPLE, load_controls, save_controls, synthesize
from .tensorio import read_tensor, write_tensor
from .trainer import FALLBACK_F0, ClipDataset, TrainConfig, fit, load_checkpoint, new_state, save_checkpoint
from .yin import FMAX_SEARCH, FMIN_SEARCH, THRESHOLD, fill_unvoiced, track, write_contour_csv

BENCH_LENGTHS = (1.0, 2.0, 4.0, 6.0, 8.0, 10.0)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


class _EditAction(argparse.Action):
    """Collect edit flags into one list, preserving command-line order."""

    def __call__(self, parser, namespace, values, option_string=None):
        edits = list(getattr(namespace, "edits", None) or [])
        edits.append(ed.Edit(self.dest, str(values)))
        namespace.edits = edits


# ---------------------------------------------------------------- shared flags


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed for noise and initialization")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/FFT thread pools (1 = fully serial); default leaves them unchanged")


def _analysis_flags(p):
    g = p.add_argument_group("analysis")
    g.add_argument("--fft", type=int, default=1024, help="mel analysis FFT size")
    g.add_argument("--hop", type=int, default=256, help="mel analysis hop (samples)")
    g.add_argument("--n-mels", type=int, default=N_MELS, help="mel bands")
    g.add_argument("--fmin", type=float, default=FMIN, help="lowest mel frequency (Hz)")
    g.add_argument("--fmax", type=float, default=FMAX, help="highest mel frequency (Hz)")
    g.add_argument("--yin-threshold", type=float, default=THRESHOLD, help="YIN absolute threshold")
    g.add_argument("--yin-fmin", type=float, default=FMIN_SEARCH, help="lowest f0 searched (Hz)")
    g.add_argument("--yin-fmax", type=float, default=FMAX_SEARCH, help="highest f0 searched (Hz)")


def _arch_flags(p):
    g = p.add_argument_group("decoder architecture")
    base = DecoderConfig()
    g.add_argument("--hidden", type=int, default=base.hidden, help="ConvNet layer width")
    g.add_argument("--layers", type=int, default=base.layers, help="layers per ConvNet")
    g.add_argument("--gru-units", type=int, default=base.gru_units, help="GRU state size")
    g.add_argument("--reduced", action="store_true", help="reduced variant: one 256-wide layer per ConvNet")
    g.add_argument("--harmonics", type=int, default=N_HARMONICS, help="harmonic count H")
    g.add_argument("--noise-bins", type=int, default=N_NOISE_BINS, help="noise filter magnitudes M")
    g.add_argument("--upsample", type=float, default=UPSAMPLE, help="mel-to-control frame-rate factor")


def _arch(args) -> DecoderConfig:
    if args.reduced:
        base = DecoderConfig.small()
        return DecoderConfig(hidden=base.hidden, layers=base.layers, gru_units=base.gru_units,
                             n_harmonics=args.harmonics, n_noise=args.noise_bins, upsample=args.upsample)
    return DecoderConfig(hidden=args.hidden, layers=args.layers, gru_units=args.gru_units,
                         n_harmonics=args.harmonics, n_noise=args.noise_bins, upsample=args.upsample)


def _mel_config(args) -> MelConfig:
    return MelConfig(fft_size=args.fft, hop=args.hop, n_mels=args.n_mels, fmin=args.fmin, fmax=args.fmax).validate()


def _edit_flags(p):
    g = p.add_argument_group("edits (applied in command-line order, after --script)")
    g.add_argument("--script", default=None, help="edit script: one 'name arg' per line")
    g.add_argument("--pitch-shift", dest="pitch_shift", action=_EditAction, metavar="SEMITONES")
    g.add_argument("--pitch-flatten", dest="pitch_flatten", action=_EditAction, metavar="HZ|mean")
    g.add_argument("--pitch-replace", dest="pitch_replace", action=_EditAction, metavar="F0.dtf")
    g.add_argument("--loudness-scale", dest="loudness_scale", action=_EditAction, metavar="GAIN")
    g.add_argument("--time-stretch", dest="time_stretch", action=_EditAction, metavar="FACTOR")
    g.add_argument("--timbre-replace", dest="timbre_replace", action=_EditAction, metavar="CONTROLS_DIR|harmonics.dtf")
    p.set_defaults(edits=[])


# ---------------------------------------------------------------- helpers


def _analyze_audio(buffer: AudioBuffer, args):
    cfg = _mel_config(args)
    mel = mel_spectrogram(buffer.samples, cfg)
    raw = track(buffer.samples, args.yin_threshold, args.yin_fmin, args.yin_fmax, cfg.fft_size, cfg.hop,
                buffer.sample_rate)
    filled = fill_unvoiced(raw) if raw.voiced.any() else raw.with_f0(np.full(len(raw), FALLBACK_F0))
    return mel, raw, filled


def _out_length(track_, f0_frames: int, hop: int) -> int:
    if track_.audio_length is not None:
        return track_.audio_length
    return max(2, (f0_frames - 1) * hop)


# ---------------------------------------------------------------- subcommands


def cmd_analyze(args) -> int:
    buffer = read_wav(args.input)
    mel, raw, filled = _analyze_audio(buffer, args)
    os.makedirs(args.out_dir, exist_ok=True)
    write_tensor(os.path.join(args.out_dir, "mel.dtf"), mel.values)
    write_tensor(os.path.join(args.out_dir, "f0_raw.dtf"), raw.f0)
    write_tensor(os.path.join(args.out_dir, "f0.dtf"), filled.f0)
    if args.csv:
        write_mel_csv(os.path.join(args.out_dir, "mel.csv"), mel)
        write_contour_csv(os.path.join(args.out_dir, "f0_raw.csv"), raw)
        write_contour_csv(os.path.join(args.out_dir, "f0.csv"), filled)
    print(f"{mel.n_frames} frames, {int(raw.voiced.sum())} voiced")
    if not raw.voiced.any():
        print(f"warning: no voiced frames; filled contour set to {FALLBACK_F0:g} Hz", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    controls = load_controls(args.controls_dir).validate()
    f0 = read_tensor(args.f0).astype(np.float64).reshape(-1)
    n = _out_length(controls, f0.shape[0], controls.mel_hop)
    with ad.no_tape():
        y = synthesize(controls, f0, n, rng_seed=args.seed).data
    write_wav(AudioBuffer(y, controls.sample_rate), args.output)
    return 0


def cmd_resynth(args) -> int:
    buffer = read_wav(args.input)
    params = load_params(args.checkpoint)
    mel, raw, filled = _analyze_audio(buffer, args)
    edits = (ed.read_script(args.script) if args.script else []) + list(args.edits)
    with ad.no_tape():
        controls = decode(mel, params, len(buffer)).arrays()
        controls, f0 = ed.apply_script(edits, controls, filled, raw.voiced)
        if args.dump_controls:
            save_controls(args.dump_controls, controls)
            write_tensor(os.path.join(args.dump_controls, "f0.dtf"), f0.f0)
        y = synthesize(controls, f0, controls.audio_length, rng_seed=args.seed).data
    write_wav(AudioBuffer(y, buffer.sample_rate), args.output)
    return 0


def _train_config(args, n_clips_long: int | None = None) -> TrainConfig:
    resolutions = tuple(int(r) for r in args.resolutions.split(","))
    cfg = TrainConfig(
        lr0=args.lr, decay=args.decay, decay_every=args.decay_every, batch_size=args.batch_size,
        segment_len=args.segment_len, max_iters=args.max_iters, seed=args.seed, alpha=args.alpha,
        resolutions=resolutions, val_fraction=args.val_fraction, val_every=args.val_every,
        checkpoint_every=args.checkpoint_every,
    )
    if args.overfit:
        cfg.batch_size = 1
        cfg.segment_len = n_clips_long
        cfg.val_fraction = 0.0
    return cfg.validate()


def cmd_train(args) -> int:
    if args.overfit:
        clips = [read_wav(args.overfit)]
    else:
        if not args.data_dir:
            raise VocoderError("train needs a data directory or --overfit WAV")
        paths = sorted(glob.glob(os.path.join(args.data_dir, "*.wav")))
        if not paths:
            raise VocoderError(f"no .wav files in {args.data_dir}")
        clips = [read_wav(p) for p in paths]
    config = _train_config(args, len(clips[0]))
    state = load_checkpoint(args.resume) if args.resume else new_state(config, _arch(args))
    dataset = ClipDataset(clips, config)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt_root = os.path.join(args.out_dir, "checkpoints")

    def progress(it, loss):
        if args.verbose and (it % 25 == 0):
            print(f"iter {it} loss {loss:.6g}", file=sys.stderr, flush=True)

    with ad.precision(64):
        fit(state, dataset, config, log_path=os.path.join(args.out_dir, "train_log.csv"),
            checkpoint_dir=ckpt_root, target_ratio=args.target_ratio, progress=progress)
    final = os.path.join(args.out_dir, "final")
    save_checkpoint(state, final, config)
    if state.loss_history:
        window = state.loss_history[-min(10, len(state.loss_history)):]
        ratio = float(np.mean(window)) / state.loss_history[0]
        print(f"iterations {state.iteration} initial_loss {state.loss_history[0]!r} "
              f"final_loss {float(np.mean(window))!r} ratio {ratio:.6f}")
    else:
        print(f"iterations {state.iteration} (initial checkpoint only)")
    print(f"checkpoint {final}")
    return 0


def bench_rows(params, lengths, reps: int = 5, warmup: int = 1, seed: int = 0, bits: int = 64):
    """Median end-to-end decoder + synthesis throughput per clip length (samples/s)."""
    rows = []
    with ad.precision(bits), ad.no_tape():
        for length in lengths:
            clip = speechlike(length, seed)
            mel = mel_spectrogram(clip.samples)
            contour = track(clip.samples)
            f0 = fill_unvoiced(contour).f0 if contour.voiced.any() else np.full(len(contour), FALLBACK_F0)
            n = len(clip)
            times = []
            for rep in range(warmup + reps):
                t0 = time.perf_counter()
                controls = decode(mel, params, n)
                synthesize(controls, f0, n, rng_seed=seed)
                if rep >= warmup:
                    times.append(time.perf_counter() - t0)
            rows.append((length, n / float(np.median(times))))
    return rows


def cmd_bench(args) -> int:
    params = load_params(args.checkpoint) if args.checkpoint else init(args.seed, _arch(args))
    lengths = [float(x) for x in args.lengths.split(",")]
    rows = bench_rows(params, lengths, args.reps, args.warmup, args.seed, args.precision)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["length_s", "samples_per_s"])
        for length, rate in rows:
            writer.writerow([f"{length:g}", f"{rate:.1f}"])
    finally:
        if args.out:
            out.close()
    rates = np.array([r for _, r in rows])
    spread = (rates.max() - rates.min()) / (2.0 * rates.mean())
    print(f"# real-time factor {rates.mean() / SAMPLE_RATE:.3f}x, spread +-{100 * spread:.1f}%", file=sys.stderr)
    return 0


def cmd_count_params(args) -> int:
    if args.checkpoint:
        print(load_params(args.checkpoint).param_count())
    else:
        print(param_count(_arch(args)))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradsuite.run(args.scope, args.seed)
    threshold = gradsuite.THRESHOLDS[args.scope]
    for r in results:
        print(r.line())
    bad = gradsuite.failures(results, args.scope)
    worst = max((r.max_rel_error for r in results), default=0.0)
    print(f"scope {args.scope} max_rel_error {worst:.3e} threshold {threshold:g}")
    for r in bad:
        print(f"FAIL {r.case} {r.tensor} index {r.index}: analytic {r.analytic!r} numeric {r.numeric!r}",
              file=sys.stderr)
    return 1 if bad else 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddsp-vocoder", description=__doc__, formatter_class=_Formatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)
        p.set_defaults(func=func)
        _common(p)
        return p

    p = add("analyze", cmd_analyze, "mel spectrogram and YIN pitch contour of a WAV file")
    p.add_argument("input", help="16-bit PCM WAV at 22050 Hz")
    p.add_argument("out_dir", help="writes mel.dtf, f0_raw.dtf (0 = unvoiced) and f0.dtf (gap-filled)")
    p.add_argument("--csv", action="store_true", help="also write mel.csv, f0_raw.csv and f0.csv")
    _analysis_flags(p)

    p = add("synth", cmd_synth, "render a saved control track and pitch contour to WAV")
    p.add_argument("controls_dir", help="directory with amplitude/harmonics/noise_mags.dtf and header.txt")
    p.add_argument("f0", help="gap-filled pitch contour (DTF1, mel frame rate)")
    p.add_argument("output", help="output WAV")

    p = add("resynth", cmd_resynth, "analyze, decode, optionally edit, and re-synthesize a WAV file")
    p.add_argument("input", help="input WAV")
    p.add_argument("checkpoint", help="decoder checkpoint directory")
    p.add_argument("output", help="output WAV")
    p.add_argument("--dump-controls", default=None, help="write the (edited) control track to this directory")
    _edit_flags(p)
    _analysis_flags(p)

    base = TrainConfig()
    p = add("train", cmd_train, "train the decoder through the synthesizer against the mel loss")
    p.add_argument("data_dir", nargs="?", default=None, help="directory of training WAV files")
    p.add_argument("--out-dir", required=True, help="log (train_log.csv) and checkpoint directory")
    p.add_argument("--overfit", default=None, metavar="WAV",
                   help="fit a single clip: batch 1, whole clip per step, no validation split")
    p.add_argument("--resume", default=None, help="continue from this checkpoint directory")
    p.add_argument("--max-iters", type=int, default=base.max_iters, help="training iterations")
    p.add_argument("--lr", type=float, default=base.lr0, help="initial Adam learning rate")
    p.add_argument("--decay", type=float, default=base.decay, help="learning-rate decay factor")
    p.add_argument("--decay-every", type=int, default=base.decay_every, help="iterations per decay step")
    p.add_argument("--batch-size", type=int, default=base.batch_size, help="segments per batch")
    p.add_argument("--segment-len", type=int, default=base.segment_len, help="segment length (samples)")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="weight of the log-mel term")
    p.add_argument("--resolutions", default=",".join(map(str, RESOLUTIONS)), help="loss FFT sizes (hop = fft/4)")
    p.add_argument("--val-fraction", type=float, default=base.val_fraction, help="held-out clip fraction")
    p.add_argument("--val-every", type=int, default=base.val_every, help="iterations between validation passes")
    p.add_argument("--checkpoint-every", type=int, default=base.checkpoint_every,
                   help="iterations between periodic checkpoints")
    p.add_argument("--target-ratio", type=float, default=None,
                   help="stop once the mean of the last 10 losses is at most this fraction of the first")
    p.add_argument("--verbose", action="store_true", help="print the loss every 25 iterations to stderr")
    _arch_flags(p)

    p = add("bench", cmd_bench, "decoder + synthesis throughput per clip length (CSV length_s,samples_per_s)")
    p.add_argument("--checkpoint", default=None, help="decoder checkpoint; default: freshly initialized")
    p.add_argument("--lengths", default=",".join(f"{x:g}" for x in BENCH_LENGTHS), help="clip lengths in seconds")
    p.add_argument("--reps", type=int, default=5, help="timed repetitions per length (median reported)")
    p.add_argument("--warmup", type=int, default=1, help="untimed warmup runs per length")
    p.add_argument("--precision", type=int, choices=(32, 64), default=64, help="float width for the benchmark")
    p.add_argument("--out", default=None, help="CSV path; default stdout")
    _arch_flags(p)
    p.set_defaults(threads=1)

    p = add("count-params", cmd_count_params, "print the decoder parameter count")
    p.add_argument("--checkpoint", default=None, help="count a checkpoint instead of an architecture")
    p.add_argument("--default-arch", action="store_true", help="the default architecture (the default)")
    _arch_flags(p)

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient verification")
    p.add_argument("--scope", choices=sorted(gradsuite.SCOPES), default="primitive",
                   help="primitive ops, synthesizers, or the full decoder-synth-loss chain")
    return parser


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (VocoderError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
