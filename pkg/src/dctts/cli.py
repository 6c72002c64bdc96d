"""``dctts`` command line.

Exit codes: 0 success, 1 bad input or failed acceptance, 2 configuration
error, 3 numeric failure.
"""

import logging
import sys
from pathlib import Path

import click

from .config import Config
from .errors import CheckpointError, ConfigError, DCTTSError, NumericError

EXIT_INPUT, EXIT_CONFIG, EXIT_NUMERIC = 1, 2, 3


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    if isinstance(exc, NumericError):
        sys.exit(EXIT_NUMERIC)
    if isinstance(exc, (ConfigError, CheckpointError)):
        sys.exit(EXIT_CONFIG)
    sys.exit(EXIT_INPUT)


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except DCTTSError as exc:
            _fail(exc)


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Discrete-diffusion text-to-speech toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("corpus-gen")
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), help="Corpus spec JSON (default: built-in).")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True, help="Seed for the built-in spec.")
def corpus_gen(spec_path, out, seed):
    """Render the synthetic sine-phoneme corpus."""
    from .corpus import ToyCorpusSpec, default_spec, generate_toy_corpus, save_corpus

    if spec_path:
        if not Path(spec_path).exists():
            raise ConfigError(f"corpus spec not found: {spec_path}")
        spec = ToyCorpusSpec.load(spec_path)
    else:
        spec = default_spec(seed=seed)
    corpus = generate_toy_corpus(spec)
    save_corpus(corpus, out)
    click.echo(f"wrote {len(corpus.utterances)} utterances ({len(corpus.train)} train, "
               f"{len(corpus.test)} held out) to {out}")


@main.command("train-vq")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--no-resume", is_flag=True, help="Start over even if a checkpoint exists.")
def train_vq(config_path, no_resume):
    """Stage 1: train the spectrogram VQ codec."""
    from .train import train_stage1_vq

    res = train_stage1_vq(Config.load(config_path), resume=not no_resume)
    last = res.losses[-1] if res.losses else {}
    click.echo(f"stage 1 done: {len(res.losses)} steps, final loss {last.get('total', float('nan')):.5f}, "
               f"checkpoint {res.run_dir / 'vq.dckp'}")


@main.command("train-diffusion")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--no-resume", is_flag=True, help="Start over even if a checkpoint exists.")
def train_diffusion(config_path, no_resume):
    """Stage 2: train text frontend and denoiser on frozen VQ tokens."""
    from .train import train_stage2_diffusion

    res = train_stage2_diffusion(Config.load(config_path), resume=not no_resume)
    frozen = "unchanged" if res.vq_checksum_before == res.vq_checksum_after else "CHANGED"
    last = res.losses[-1] if res.losses else {}
    click.echo(f"stage 2 done: {len(res.losses)} steps, final total {last.get('total', float('nan')):.5f}, "
               f"VQ weights {frozen}")
    if frozen != "unchanged":
        raise NumericError("VQ weights changed during stage 2")


@main.command()
@click.option("--text", required=True)
@click.option("--ckpt", required=True, type=click.Path(file_okay=False, exists=True), help="Run directory.")
@click.option("--steps", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output WAV path.")
@click.option("--iterations", default=None, type=int, help="Griffin-Lim iterations (config default).")
@click.option("--plot/--no-plot", default=True, help="Also render a mel PNG next to the WAV.")
def synthesize(text, ckpt, steps, seed, out, iterations, plot):
    """Text to WAV, writing mel (.mel) and token (.tok) files alongside."""
    from .report import plot_mels
    from .synth import Synthesizer

    syn = Synthesizer.from_run(ckpt)
    res = syn.synthesize(text, steps, seed, iterations)
    files = res.save(out, syn.vq.cfg.K)
    if plot:
        files.append(plot_mels(Path(out).with_suffix(".png"), {"generated": res.mel.values}, title=text))
    click.echo(f"{' '.join(res.phonemes.symbols)} -> {res.tokens.shape[1]} columns, "
               f"{res.audio_seconds:.2f} s audio")
    for f in files:
        click.echo(f"  {f}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(file_okay=False, exists=True), help="Run directory.")
@click.option("--steps", default=100, show_default=True)
@click.option("--repeats", default=3, show_default=True)
@click.option("--csv", "csv_path", default=None, type=click.Path(dir_okay=False))
@click.option("--text", "texts", multiple=True, help="Benchmark text (repeatable; default: held-out corpus).")
@click.option("--threads", default=None, type=int, help="torch intra-op threads (timing only).")
@click.option("--vocoder/--no-vocoder", default=True, help="Also time Griffin-Lim for end-to-end RTF.")
def bench(ckpt, steps, repeats, csv_path, texts, threads, vocoder):
    """mRTF, parameter count and GFLOPs of a trained run."""
    from .bench import bench_synthesizer, write_bench_csv
    from .corpus import load_corpus
    from .synth import Synthesizer

    syn = Synthesizer.from_run(ckpt)
    if not texts:
        try:
            texts = [u.text for u in load_corpus(syn.cfg["corpus.dir"]).test] or None
        except DCTTSError:
            texts = None
        texts = texts or ["see the moon", "no snow"]
    rep = bench_synthesizer(syn, list(texts), steps, repeats, threads=threads, vocoder=vocoder)
    for k, v in rep.row().items():
        click.echo(f"{k}: {v}")
    if csv_path:
        write_bench_csv([rep], csv_path)


@main.command()
@click.option("--workdir", default=None, type=click.Path(file_okay=False),
              help="Where toy runs live (reused when present).")
@click.option("--only", default="", help="Comma-separated criterion numbers.")
@click.option("--csv", "csv_path", default=None, type=click.Path(dir_okay=False))
def accept(workdir, only, csv_path):
    """Run the acceptance suite, one PASS/FAIL line per criterion."""
    from .acceptance import NAMES, ToyPipeline, run_all, write_results_csv

    try:
        numbers = [int(x) for x in only.split(",") if x.strip()] or None
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {only!r}", param_hint="--only")
    if numbers and any(n not in NAMES for n in numbers):
        raise click.BadParameter(f"criteria are numbered {min(NAMES)}-{max(NAMES)}", param_hint="--only")
    pipe = ToyPipeline(workdir) if (numbers is None or any(n >= 7 for n in numbers)) else None
    results = run_all(pipe, numbers, echo=click.echo)
    if csv_path:
        write_results_csv(results, csv_path)
    passed = sum(r.passed for r in results)
    click.echo(f"{passed}/{len(results)} criteria passed")
    if passed != len(results):
        sys.exit(EXIT_INPUT)


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", default=None, type=click.Path(file_okay=False))
def report(run_dir, out):
    """Summarise a run directory into CSV tables and figures."""
    from .report import report as build_report

    res = build_report(run_dir, out)
    click.echo(res.text, nl=False)
    for f in res.files:
        click.echo(f"  {f}")


@main.command()
@click.option("--T", "T", default=100, show_default=True)
@click.option("--K", "K", default=128, show_default=True)
@click.option("--mode", type=click.Choice(["cumulative", "per_step"]), default="cumulative", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def schedule(T, K, mode, out):
    """Export a noise schedule as CSV."""
    from .diffusion import build_linear_schedule

    build_linear_schedule(T, K, mode=mode).to_csv(out)
    click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
