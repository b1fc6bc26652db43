"""
Run drivers behind the CLI verbs.

Each driver takes a validated RunConfig, writes its outputs through an
OutputHelper (file names carry the config hash, text outputs echo the
config as '#' header lines) and returns an in-memory summary.
"""

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from fmm.comm import run_ranks
from fmm.engine import FmmEngine
from fmm.errors import AcceptanceBandError
from fmm.model import ParticleResult, ParticleSet, direct_result
from fmm.partition import morton_partition, multisection, pack_particles, partition_boxes, unpack_particles
from flow.fields import SpectrumShape, write_field, write_snapshot, write_spectrum_csv
from flow.spectral import energy_spectrum, flow_statistics, q_invariant, spectral_init, spectral_step
from flow.vortex import distributed_rates, init_from_spectrum, lattice_spectrum, reinitialize, step
from harness.config import RunConfig
from fmm.timers import Category, CategoryTimers
from harness.perf import PerfReport
from utils.config_manager import get_config_manager
from utils.logger import get_logger
from utils.output_helper import OutputHelper


def random_cloud(n: int, seed: int, half_width: float = math.pi, sigma: float = 0.1) -> ParticleSet:
    """Uniform positions in the cube, unit-normal strengths, one core radius."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-half_width, half_width, size=(n, 3))
    gammas = rng.standard_normal((n, 3))
    return ParticleSet(positions, gammas, sigma)


def relative_l2(approx, exact) -> float:
    norm = np.linalg.norm(exact)
    diff = np.linalg.norm(np.asarray(approx) - np.asarray(exact))
    return float(diff / norm) if norm > 0 else float(diff)


def _write_csv(path, header_lines, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        writer.writerows(rows)
    return path


class PairCounter:
    """Wraps a rate function and sums its P2P pair counters."""

    def __init__(self):
        self.pairs_bs = 0
        self.pairs_st = 0

    def wrap(self, rates):
        def counted(particles) -> ParticleResult:
            result = rates(particles)
            self.pairs_bs += result.pairs_biot_savart
            self.pairs_st += result.pairs_stretching
            return result
        return counted


# ============================================================================
# VORTEX RUN
# ============================================================================

@dataclass
class VortexRun:
    particles: ParticleSet
    time: float
    report: PerfReport
    snapshots: List[Path] = field(default_factory=list)
    spectra: List[Path] = field(default_factory=list)
    report_path: Optional[Path] = None


def _gather_sorted(comm, particles):
    parts = comm.allgather(pack_particles(particles))
    merged = ParticleSet.concatenate([unpack_particles(buf, r) for r, buf in enumerate(parts)])
    return merged.subset(np.argsort(merged.ids, kind="stable"))


def run_vortex(config: RunConfig, sharpen: bool = False) -> VortexRun:
    """
    Vortex method on ``config.ranks`` in-process ranks.

    Every rank builds the same initial lattice and keeps an interleaved
    share; one multisection at startup fixes the rank boxes for the whole
    run. Each step evaluates with the LET-overlapped FMM, the boxes growing
    to cover particles that drifted out, and reinitialization hands every
    rank the new lattice particles inside its own box. Writes the initial and
    final snapshot, the initial and final spectrum and the timing report.
    """
    logger = get_logger()
    logger.log_run_start(f"run-vortex {config.config_hash()}")
    out = OutputHelper(config.output_dir, config.config_hash())
    header = config.to_header_lines()
    shape = SpectrumShape.for_lattice(config.lattice_n, config.energy)
    params = config.flow_params()
    fmm_config = config.fmm_config(periodic=True)
    serial_engine = FmmEngine(fmm_config)

    initial = init_from_spectrum(shape, config.seed, config.lattice_n, params, config.overlap_ratio, sharpen)
    run = VortexRun(initial.particles, 0.0, PerfReport(ranks=config.ranks))
    run.snapshots.append(write_snapshot(out.path_for("snapshot", "vpm", step=0), initial.particles, 0.0))
    run.spectra.append(write_spectrum_csv(out.path_for("spectrum", "csv", step=0, tag="vortex"),
                                          lattice_spectrum(initial, serial_engine), header))
    if config.steps == 0:
        logger.log_run_end(f"run-vortex {config.config_hash()}")
        return run

    def worker(comm):
        timers = CategoryTimers()
        counter = PairCounter()
        engine = FmmEngine(fmm_config, timers)
        state = replace(initial, particles=initial.particles.subset(np.arange(comm.rank, len(initial.particles),
                                                                              comm.size)))
        comm.barrier()
        start = time.perf_counter()
        with timers.measure(Category.TREE_CONSTRUCTION):
            partitions, local = multisection(comm, state.particles, fmm_config.domain)
        state = replace(state, particles=local)
        rates = counter.wrap(distributed_rates(engine, comm, partitions))
        for _ in range(config.steps):
            state = step(state, engine, rates, timers)
            if config.reinit_every and state.step_count % config.reinit_every == 0:
                with timers.measure(Category.PARTICLE_UPDATE):
                    state = reinitialize(state, comm, partitions)
            comm.logger.debug(f"step {state.step_count}: t={state.time:.4f}, {len(state.particles)} local particles")
        wall = time.perf_counter() - start
        return _gather_sorted(comm, state.particles), state.time, timers, counter, wall

    outcomes = run_ranks(config.ranks, worker, config.timeout)
    particles, t_end = outcomes[0][0], outcomes[0][1]
    timers = [o[2] for o in outcomes]
    report = PerfReport.from_timers(timers, sum(o[3].pairs_bs for o in outcomes),
                                    sum(o[3].pairs_st for o in outcomes), max(o[4] for o in outcomes))

    final = replace(initial, particles=particles, time=t_end)
    run.particles, run.time, run.report = particles, t_end, report
    run.snapshots.append(write_snapshot(out.path_for("snapshot", "vpm", step=config.steps), particles, t_end))
    run.spectra.append(write_spectrum_csv(out.path_for("spectrum", "csv", step=config.steps, tag="vortex"),
                                          lattice_spectrum(final, serial_engine), header))
    run.report_path = Path(report.write(out.path_for("report", "txt", tag="vortex"), header))
    logger.log_metric("vortex wall time", report.wall_time, "s")
    logger.log_metric("model flop rate", report.flop_rate, "flop/s")
    logger.log_run_end(f"run-vortex {config.config_hash()}")
    return run


# ============================================================================
# SPECTRAL RUN
# ============================================================================

@dataclass
class SpectralRun:
    field: object
    spectra: List[Path] = field(default_factory=list)
    fields: List[Path] = field(default_factory=list)


def run_spectral(config: RunConfig) -> SpectralRun:
    """Pseudo-spectral run; writes velocity and Q fields plus spectra at start and end."""
    logger = get_logger()
    logger.log_run_start(f"run-spectral {config.config_hash()}")
    out = OutputHelper(config.output_dir, config.config_hash())
    header = config.to_header_lines()
    shape = SpectrumShape.for_lattice(config.lattice_n, config.energy)
    state = spectral_init(shape, config.seed, config.lattice_n, config.nu)
    run = SpectralRun(state)

    def emit(s, step_number):
        velocity = s.velocity()
        run.spectra.append(write_spectrum_csv(out.path_for("spectrum", "csv", step=step_number, tag="spectral"),
                                              energy_spectrum(velocity), header))
        run.fields.append(write_field(out.path_for("velocity", "fld", step=step_number), velocity))
        run.fields.append(write_field(out.path_for("q", "fld", step=step_number), q_invariant(velocity)))

    emit(state, 0)
    for _ in range(config.steps):
        state = spectral_step(state, config.dt)
    if config.steps:
        emit(state, config.steps)
    run.field = state
    logger.log_run_end(f"run-spectral {config.config_hash()}")
    return run


# ============================================================================
# COMPARISON
# ============================================================================

@dataclass
class Comparison:
    k: np.ndarray
    E_vortex: np.ndarray
    E_spectral: np.ndarray
    log_ratio: np.ndarray
    energy_rel_diff: float
    t_over_T: float
    steps: int
    csv_path: Optional[Path] = None

    @property
    def max_log_ratio(self):
        return float(np.max(np.abs(self.log_ratio))) if self.log_ratio.size else 0.0


def _log_ratio(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where((a > 0) & (b > 0), np.log10(a / np.where(b > 0, b, 1.0)), np.inf)
    ratio[(a == 0) & (b == 0)] = 0.0
    return ratio


def run_compare(config: RunConfig, band: Optional[Dict] = None) -> Comparison:
    """
    Run both solvers from the same initial field to target_t_over_T eddy
    turnovers and compare their spectra on shells 1..M/4.

    The vortex particles start from the sharpened lattice so their nodal
    vorticity equals the spectral field's. T comes from the initial field.

    Raises:
        AcceptanceBandError: total energies differ by more than the band, or
            a shell's |log10 ratio| exceeds it (names the first such shell)
    """
    logger = get_logger()
    band = band or get_config_manager().get_acceptance()["spectrum_agreement"]
    out = OutputHelper(config.output_dir, config.config_hash())
    M = config.lattice_n
    shape = SpectrumShape.for_lattice(M, config.energy)

    spectral = spectral_init(shape, config.seed, M, config.nu)
    T = flow_statistics(spectral.velocity(), config.nu).turnover_time
    steps = int(math.ceil(config.target_t_over_T * T / config.dt - 1e-9)) if math.isfinite(T) else 0
    logger.info(f"compare: T={T:.4f}, {steps} steps of dt={config.dt} to t/T={config.target_t_over_T}")

    for _ in range(steps):
        spectral = spectral_step(spectral, config.dt)

    engine = FmmEngine(config.fmm_config(periodic=True))
    vortex = init_from_spectrum(shape, config.seed, M, config.flow_params(), config.overlap_ratio, sharpen=True)
    for _ in range(steps):
        vortex = step(vortex, engine)
        if config.reinit_every and vortex.step_count % config.reinit_every == 0:
            vortex = reinitialize(vortex)

    E_s = energy_spectrum(spectral.velocity()).E
    E_v = lattice_spectrum(vortex, engine).E
    kmax = M // 4
    k = np.arange(1, kmax + 1)
    ratio = _log_ratio(E_v[1:kmax + 1], E_s[1:kmax + 1])
    total_s, total_v = E_s[1:].sum(), E_v[1:].sum()
    energy_rel = float(abs(total_v - total_s) / total_s) if total_s > 0 else float(abs(total_v))

    result = Comparison(k, E_v[1:kmax + 1], E_s[1:kmax + 1], ratio, energy_rel,
                        steps * config.dt / T if math.isfinite(T) and T > 0 else 0.0, steps)
    header = config.to_header_lines() + [f"t_over_T={result.t_over_T:.6f}", f"energy_rel_diff={energy_rel:.6e}",
                                         f"max_log10_ratio={result.max_log_ratio:.6e}"]
    rows = [(int(kk), f"{ev:.17g}", f"{es:.17g}", f"{r:.6e}") for kk, ev, es, r in zip(k, result.E_vortex,
                                                                                        result.E_spectral, ratio)]
    result.csv_path = _write_csv(out.path_for("compare", "csv"), header, ("k", "E_vortex", "E_spectral", "log10_ratio"),
                                 rows)

    offending = np.flatnonzero(np.abs(ratio) > band["log_ratio_max"])
    if offending.size:
        shell = int(k[offending[0]])
        raise AcceptanceBandError(f"shell k={shell}: |log10 E_vortex/E_spectral| = {abs(ratio[offending[0]]):.3f} "
                                  f"exceeds {band['log_ratio_max']}", shell=shell, log_ratio=float(ratio[offending[0]]))
    if energy_rel > band["energy_rel_max"]:
        raise AcceptanceBandError(f"total energy differs by {energy_rel:.3%} (band {band['energy_rel_max']:.0%})")
    logger.log_verification(f"spectra agree within band (max |log10 ratio| {result.max_log_ratio:.3f})", True)
    return result


# ============================================================================
# WEAK SCALING
# ============================================================================

@dataclass
class ScalingRow:
    ranks: int
    particles: int
    wall_time: float
    efficiency: float
    report: PerfReport


def _distributed_once(config: RunConfig, ranks: int):
    fmm_config = config.fmm_config(periodic=False)

    def worker(comm):
        timers = CategoryTimers()
        engine = FmmEngine(fmm_config, timers)
        local = random_cloud(config.particles_per_rank, config.seed + comm.rank)
        local = ParticleSet(local.positions, local.gammas, local.sigmas,
                            local.ids + comm.rank * config.particles_per_rank)
        comm.barrier()
        start = time.perf_counter()
        with timers.measure(Category.TREE_CONSTRUCTION):
            partitions, local = multisection(comm, local)
        result, _ = engine.evaluate_distributed(comm, local, partitions)
        wall = time.perf_counter() - start
        return timers, result.pairs_biot_savart, result.pairs_stretching, wall

    outcomes = run_ranks(ranks, worker, config.timeout)
    return PerfReport.from_timers([o[0] for o in outcomes], sum(o[1] for o in outcomes),
                                  sum(o[2] for o in outcomes), max(o[3] for o in outcomes))


def run_weak_scaling(config: RunConfig, rank_list=None) -> List[ScalingRow]:
    """
    Fixed particles per rank; efficiency t_ref / t_P against the first
    entry of the rank list, whose efficiency is 1 by definition. Writes a
    CSV with the timing categories per rank count.
    """
    rank_list = list(rank_list or config.rank_list)
    out = OutputHelper(config.output_dir, config.config_hash())
    rows = []
    t_ref = None
    for ranks in rank_list:
        report = _distributed_once(config, ranks)
        if t_ref is None:
            t_ref = report.wall_time
        efficiency = t_ref / report.wall_time if report.wall_time > 0 else float("nan")
        rows.append(ScalingRow(ranks, ranks * config.particles_per_rank, report.wall_time, efficiency, report))
        get_logger().info(f"weak scaling P={ranks}: {report.wall_time:.3f}s, efficiency {efficiency:.3f}")

    columns = ["ranks", "particles", "wall_time", "efficiency"] + list(Category.ALL) + ["unattributed", "comm_total"]
    table = []
    for row in rows:
        cats = [f"{row.report.categories[c]:.6f}" for c in Category.ALL]
        table.append([row.ranks, row.particles, f"{row.wall_time:.6f}", f"{row.efficiency:.6f}"] + cats
                     + [f"{row.report.unattributed:.6f}", f"{row.report.comm_total:.6f}"])
    _write_csv(out.path_for("weak_scaling", "csv"), config.to_header_lines() + [f"baseline_ranks={rank_list[0]}"],
               columns, table)
    return rows


# ============================================================================
# FMM BENCHMARK
# ============================================================================

@dataclass
class BenchRow:
    p: int
    rel_l2_error: float
    seconds: float
    p2p_pairs: int
    m2l_pairs: int


def fmm_bench(config: RunConfig, p_list=None, particles: Optional[ParticleSet] = None) -> List[BenchRow]:
    """Free-space accuracy and timing over expansion orders for one cloud."""
    particles = particles if particles is not None else random_cloud(config.n_particles, config.seed)
    exact = direct_result(particles, particles).velocity
    rows = []
    for p in (p_list or config.p_list):
        engine = FmmEngine(config.fmm_config(periodic=False, p=p))
        start = time.perf_counter()
        result = engine.evaluate(particles)
        seconds = time.perf_counter() - start
        rows.append(BenchRow(p, relative_l2(result.velocity, exact), seconds,
                             engine.last_stats.p2p_pairs, engine.last_stats.m2l_pairs))
        get_logger().info(f"fmm-bench p={p}: error {rows[-1].rel_l2_error:.3e} in {seconds:.3f}s")
    out = OutputHelper(config.output_dir, config.config_hash())
    _write_csv(out.path_for("fmm_bench", "csv"), config.to_header_lines(),
               ("p", "rel_l2_error", "seconds", "p2p_pairs", "m2l_pairs"),
               [(r.p, f"{r.rel_l2_error:.6e}", f"{r.seconds:.6f}", r.p2p_pairs, r.m2l_pairs) for r in rows])
    return rows


# ============================================================================
# PARTITION TEST
# ============================================================================

@dataclass
class PartitionSummary:
    method: str
    counts: List[int]
    boxes: list
    overlap_volume: float


def _overlap_volume(boxes):
    boxes = [b for b in boxes if b is not None]
    total = 0.0
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            total += boxes[i].intersection_volume(boxes[j])
    return total


def partition_test(config: RunConfig) -> List[PartitionSummary]:
    """Multisection against Morton-order partitioning of the same cloud."""
    ranks = config.ranks
    n = config.n_particles

    def worker(comm):
        share = random_cloud(n, config.seed).subset(np.arange(comm.rank, n, comm.size))
        partitions, local = multisection(comm, share)
        orb_boxes = partition_boxes(comm, local, np.full(len(local), comm.rank))
        owners = morton_partition(comm, share)
        morton_counts = comm.allreduce_sum(np.bincount(owners, minlength=comm.size))
        morton_boxes = partition_boxes(comm, share, owners)
        return [p.particle_count for p in partitions], orb_boxes, morton_counts.tolist(), morton_boxes

    orb_counts, orb_boxes, morton_counts, morton_boxes = run_ranks(ranks, worker, config.timeout)[0]
    summaries = [
        PartitionSummary("multisection", orb_counts, orb_boxes, _overlap_volume(orb_boxes)),
        PartitionSummary("morton", morton_counts, morton_boxes, _overlap_volume(morton_boxes)),
    ]
    rows = []
    for s in summaries:
        for rank, (count, box) in enumerate(zip(s.counts, s.boxes)):
            lo = box.lo if box is not None else [float("nan")] * 3
            hi = box.hi if box is not None else [float("nan")] * 3
            rows.append([s.method, rank, count] + [f"{v:.6f}" for v in lo] + [f"{v:.6f}" for v in hi]
                        + [f"{s.overlap_volume:.6e}"])
    out = OutputHelper(config.output_dir, config.config_hash())
    _write_csv(out.path_for("partition", "csv"), config.to_header_lines(),
               ("method", "rank", "count", "x_min", "y_min", "z_min", "x_max", "y_max", "z_max", "overlap_volume"),
               rows)
    return summaries
