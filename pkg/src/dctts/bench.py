"""mRTF / parameter / FLOP benchmark harness.

mRTF is seconds of speech divided by mel-generation seconds. The timed region
covers text encoding, diffusion sampling and VQ decoding; Griffin-Lim and any
file I/O stay outside it.
"""

import csv
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import torch

from .audio import AudioParams, griffin_lim
from .errors import ConfigError, InputError
from .substrate import count_flops, count_parameters

BENCH_COLUMNS = ["mrtf", "wall_seconds", "audio_seconds", "parameters", "gflops", "steps", "repeats",
                 "texts", "threads", "end_to_end_rtf", "hardware"]


@dataclass
class BenchReport:
    mrtf: float
    wall_seconds: float
    audio_seconds: float
    parameters: int = 0
    gflops: float = 0.0
    steps: int = 0
    repeats: int = 0
    texts: int = 0
    threads: int = 1
    end_to_end_rtf: float = float("nan")
    hardware: str = ""
    timings: List[float] = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in BENCH_COLUMNS}


def hardware_note() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'}, torch {torch.__version__}, " \
           f"{torch.get_num_threads()} threads"


def bench_mrtf(generate: Callable[[str], int], texts: Sequence[str], repeats: int = 3,
               params: AudioParams = AudioParams()) -> BenchReport:
    """Time ``generate(text) -> mel frames`` over all texts, ``repeats`` times; median wall time."""
    if repeats < 3:
        raise ConfigError(f"repeats must be >= 3, got {repeats}")
    if not texts:
        raise InputError("no benchmark texts")
    timings, frames = [], 0
    for _ in range(repeats):
        total = 0
        start = time.perf_counter()
        for text in texts:
            total += int(generate(text))
        timings.append(time.perf_counter() - start)
        frames = total
    audio = frames * params.hop_length / params.sample_rate
    if audio <= 0:
        raise InputError("benchmark generated zero-duration audio")
    wall = statistics.median(timings)
    return BenchReport(mrtf=audio / wall, wall_seconds=wall, audio_seconds=audio,
                       repeats=repeats, texts=len(texts), timings=timings, hardware=hardware_note())


def inference_parameters(synth) -> int:
    """Parameters touched at inference: frontend, denoiser, codebook and VQ decoder."""
    return (count_parameters(synth.models.frontend) + count_parameters(synth.models.denoiser)
            + synth.vq.codebook.numel() + count_parameters(synth.vq.decoder))


def bench_synthesizer(synth, texts: Sequence[str], steps: int, repeats: int = 3, seed: int = 0,
                      threads: Optional[int] = None, vocoder: bool = True) -> BenchReport:
    """Benchmark a loaded :class:`~dctts.synth.Synthesizer`; ``threads`` changes timing only."""
    previous = torch.get_num_threads()
    if threads:
        torch.set_num_threads(threads)
    try:
        report = bench_mrtf(lambda text: synth.generate_mel(text, steps, seed).mel.frames, texts, repeats,
                            synth.params)
        flops = sum(count_flops(lambda: synth.generate_mel(text, steps, seed), synth.models.frontend,
                                synth.models.denoiser, synth.vq) for text in texts)
        report.gflops = flops / len(texts) / 1e9
        report.parameters = inference_parameters(synth)
        report.steps = steps
        report.threads = torch.get_num_threads()
        if vocoder:
            start = time.perf_counter()
            for text in texts:
                griffin_lim(synth.generate_mel(text, steps, seed).mel,
                            synth.cfg["audio.griffin_lim_iters"], synth.params)
            report.end_to_end_rtf = report.audio_seconds / (time.perf_counter() - start)
    finally:
        torch.set_num_threads(previous)
    return report


def write_bench_csv(reports: Sequence[BenchReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())
    return path
