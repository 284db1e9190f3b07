"""Scenario pipelines behind the command line.

Each scenario writes plain CSV/JSON artifacts plus ``manifest.json``, which
lists every file with its SHA-256.  Nothing time-dependent is written, so a
rerun with the same configuration reproduces every byte.
"""
from __future__ import annotations

import json
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import channel as ch
from . import estimation as est
from . import io, keyrate as kr, rx, seeding, tx
from .config import ScenarioConfig
from .errors import ConfigurationError, CvqkdError

CALIBRATION_FRAME = 2**31 - 1
T_DECIMATION = 64


def _version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:
        return "0.1.0"


def versions() -> dict:
    import scipy
    return {"package": _version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "generator": seeding.GENERATOR_NAME}


def detector_for(cfg: ScenarioConfig) -> ch.DetectorModel:
    """Detector whose noise stream is keyed by both the run seed and the
    detector's own seed."""
    ss = np.random.SeedSequence([int(cfg.seed), int(cfg.detector.seed), seeding.DETECTOR])
    return replace(cfg.detector, seed=int(ss.generate_state(1)[0]))


def channel_trace(cfg: ScenarioConfig, T: np.ndarray, frame_index: int) -> ch.ChannelTrace:
    n = len(T)
    c = cfg.channel
    rng = seeding.stream(cfg.seed, seeding.CHANNEL, frame_index, 1)
    theta_lo = ch.wiener_phase(n, c.linewidth, cfg.layout.sample_rate, rng)
    return ch.ChannelTrace(T, np.full(n, c.theta_s), theta_lo, c.delta_f)


def synthesize(cfg: ScenarioConfig, T: np.ndarray, frame_index: int, excess: Optional[float] = None):
    """Transmit, propagate and detect one frame.  Returns (TxFrame, DetectionRecord)."""
    layout = cfg.layout
    frame = tx.build_frame(layout, cfg.seed, frame_index, cfg.imbalance.model())
    base = frame.baseband
    eps = cfg.channel.excess_noise if excess is None else excess
    if eps > 0:
        # referred to the channel input, so it is added before the channel
        base = ch.inject_excess_noise(base, eps, cfg.seed, frame_index)
    trace = channel_trace(cfg, T, frame_index)
    optical = ch.propagate(base, trace)
    rec = ch.detect(optical, detector_for(cfg), layout, trace, frame_index)
    return frame, rec


def calibrate(cfg: ScenarioConfig) -> tuple[rx.CalibrationReference, dict]:
    layout = cfg.layout
    frame, rec = synthesize(cfg, np.ones(layout.n_samples), CALIBRATION_FRAME, excess=0.0)
    ref = rx.sync_reference(frame.quantum_symbols, layout, cfg.rx.sync_symbols)
    cal = rx.calibrate_reference(rec, ref, cfg=cfg.rx)
    mag = np.abs(cal.mu4_0)
    info = {"relative_spread": float(np.std(mag) / np.mean(mag)), "mean_abs_mu4": float(np.mean(mag)),
            "n_symbols": len(mag), "start": cal.start, "layout_hash": cal.layout_hash}
    return cal, info


def load_or_calibrate(cfg: ScenarioConfig) -> tuple[rx.CalibrationReference, dict]:
    if cfg.calibration and Path(cfg.calibration).exists():
        cal = rx.CalibrationReference.load(cfg.calibration)
        if cal.layout_hash != cfg.layout.hash():
            raise ConfigurationError("calibration file was recorded with a different frame layout")
        return cal, {"source": str(cfg.calibration)}
    cal, info = calibrate(cfg)
    info["source"] = "computed"
    return cal, info


@dataclass
class FrameJob:
    index: int
    label: str
    t_kind: str
    loss_db: Optional[float] = None


def _frame_T(cfg: ScenarioConfig, job: FrameJob) -> np.ndarray:
    n = cfg.layout.n_samples
    if job.t_kind == "fixed":
        return np.full(n, 10 ** (-job.loss_db / 10))
    t = cfg.turbulence
    return ch.sample_beam_wander_trace(t.model(), n, t.correlation_time, cfg.layout.sample_rate,
                                       cfg.seed, job.index)


def run_frame(cfg: ScenarioConfig, cal: rx.CalibrationReference, job: FrameJob, out_dir: str) -> dict:
    """Full chain for one frame; errors are recorded rather than raised."""
    layout = cfg.layout
    try:
        T = _frame_T(cfg, job)
        frame, rec = synthesize(cfg, T, job.index)
        ref = rx.sync_reference(frame.quantum_symbols, layout, cfg.rx.sync_symbols)
        res = rx.receive_frame(rec, ref, cal, cfg=cfg.rx)
    except CvqkdError as exc:
        return {"frame": job.index, "label": job.label, "ok": False, **exc.to_dict()}
    det = detector_for(cfg)
    series = res.transmittance
    summary = {"frame": job.index, "label": job.label, "ok": True, **res.summary()}
    true_T = T[::layout.sps][res.quantum.start:res.quantum.start + len(res.quantum)]
    summary["true_mean_T"] = float(np.mean(true_T))
    budgets = {}
    for method in est.METHODS:
        try:
            b = est.estimate_excess_noise(frame.quantum_symbols, res.quantum, series, det, method=method)
            budgets[method] = b.epsilon
            if method == "residual":
                budgets["residual_average_T"] = est.estimate_excess_noise(
                    frame.quantum_symbols, res.quantum, series, det, method=method, average_t=True).epsilon
        except CvqkdError as exc:
            budgets[method] = exc.to_dict()
    summary["epsilon"] = budgets
    imb = cfg.imbalance
    summary["min_var"] = est.min_variance(imb.d, np.radians(imb.theta_deg), layout.v_a)
    summary["epsilon_f"] = est.sqrt_t_variance(series.T) * (layout.v_a - 1)
    out = Path(out_dir)
    if job.index < cfg.output.symbol_csv_frames:
        p = res.pilot
        q = res.quantum.symbols
        io.write_numeric_csv(out / f"symbols_{job.index:05d}.csv",
                             ["symbol_index", "T_hat", "pilot_re", "pilot_im", "quantum_re", "quantum_im"],
                             [np.arange(len(q)) + res.quantum.start, series.T,
                              p.mu4.real, p.mu4.imag, q.real, q.imag])
    if cfg.output.write_samples and job.index == 0:
        io.write_samples(out / "record_00000.cvqk", rec.samples)
    io.write_json(out / f"frame_{job.index:05d}.json", summary)
    edges = est.bin_edges_db(*cfg.keyrate.range_db, cfg.keyrate.bin_width_db)
    binned = est.excess_noise_by_bin(frame.quantum_symbols, res.quantum, series, det, edges, min_count=1)
    return {"summary": summary, "T_hat": series.T[::T_DECIMATION], "true_T": true_T[::T_DECIMATION],
            "bins": binned, "ok": True}


def _map(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


class _FrameRunner:
    def __init__(self, cfg, cal, out_dir):
        self.cfg, self.cal, self.out_dir = cfg, cal, out_dir

    def __call__(self, job: FrameJob) -> dict:
        return run_frame(self.cfg, self.cal, job, self.out_dir)


def _skr_input(cfg: ScenarioConfig, v_a: float, T: float, eps: float) -> kr.SkrInput:
    k = cfg.keyrate
    return kr.SkrInput(v_a, T, max(eps, 0.0), cfg.detector.eta, cfg.detector.nu_el, k.beta, k.fer,
                       cfg.layout.symbol_rate, k.block_size, k.eps_smooth, k.eps_pe)


def _safe_rate(inp_fn) -> dict:
    try:
        return inp_fn().to_dict()
    except CvqkdError as exc:
        return exc.to_dict()


def merge_bins(parts: list) -> est.BinnedNoise:
    edges = parts[0].edges_db
    nb = len(edges) - 1
    counts = np.zeros(nb, dtype=int)
    wt = np.zeros(nb)
    weps = np.zeros(nb)
    for b in parts:
        ok = b.counts > 0
        counts[ok] += b.counts[ok]
        wt[ok] += b.counts[ok] * b.t_mean[ok]
        weps[ok] += b.counts[ok] * b.t_mean[ok] * b.epsilon[ok]
    with np.errstate(invalid="ignore", divide="ignore"):
        t_mean = np.where(counts > 0, wt / np.maximum(counts, 1), np.nan)
        eps = np.where(wt > 0, weps / np.where(wt > 0, wt, 1), np.nan)
    return est.BinnedNoise(edges, counts, t_mean, eps)


def _successful(results: list) -> list:
    return [r for r in results if r.get("ok") and "summary" in r]


def _frame_summaries(results: list) -> list:
    return [r["summary"] if "summary" in r else r for r in results]


def run_fixed_loss(cfg: ScenarioConfig, out: Path) -> dict:
    cal, cal_info = load_or_calibrate(cfg)
    jobs = [FrameJob(i * cfg.frames + f, f"loss_{loss:g}dB", "fixed", loss)
            for i, loss in enumerate(cfg.losses_db) for f in range(cfg.frames)]
    results = _map(_FrameRunner(cfg, cal, str(out)), jobs, cfg.workers)
    rows, per_loss = [], {}
    for loss in cfg.losses_db:
        label = f"loss_{loss:g}dB"
        good = [r["summary"] for r in _successful(results) if r["summary"]["label"] == label]
        entry = {"frames_ok": len(good)}
        if good:
            t_hat = float(np.mean([g["mean_T"] for g in good]))
            eps = {m: float(np.mean([g["epsilon"][m] for g in good])) for m in est.METHODS}
            entry.update(mean_T=t_hat, mean_T_db=10 * np.log10(t_hat), epsilon=eps,
                         true_mean_T=float(np.mean([g["true_mean_T"] for g in good])))
            rep = _safe_rate(lambda: kr.secret_key_rate(_skr_input(cfg, cfg.layout.v_a, min(t_hat, 1.0),
                                                                       eps["moments"])))
            entry["skr"] = rep
            if "R" in rep:
                rows.append([10 * np.log10(t_hat), eps["moments"], rep["I_AB"], rep["kappa_BE"], rep["R"]])
        per_loss[label] = entry
    io.write_rows(out / "keyrate.csv", ["T_db", "epsilon", "I_AB", "kappa_BE", "R"], rows)
    return {"calibration": cal_info, "losses": per_loss, "frames": _frame_summaries(results)}


def run_turbulence(cfg: ScenarioConfig, out: Path) -> dict:
    cal, cal_info = load_or_calibrate(cfg)
    jobs = [FrameJob(f, f"turbulence_{f}", "turbulence") for f in range(cfg.frames)]
    results = _map(_FrameRunner(cfg, cal, str(out)), jobs, cfg.workers)
    good = _successful(results)
    k = cfg.keyrate
    agg: dict = {"calibration": cal_info, "frames": _frame_summaries(results)}
    if not good:
        return agg
    t_hat = np.concatenate([r["T_hat"] for r in good])
    true_T = np.concatenate([r["true_T"] for r in good])
    model = cfg.turbulence.model()
    stats_hat = est.transmittance_stats(t_hat, k.bin_width_db, model=model)
    stats_true = est.transmittance_stats(true_T, k.bin_width_db)
    for name, st in (("transmittance_hist.csv", stats_hat), ("true_transmittance_hist.csv", stats_true)):
        io.write_csv(out / name, ["bin_low_db", "bin_high_db", "probability"],
                     [st.edges_db[:-1], st.edges_db[1:], st.probabilities])
    frame_T = np.array([r["summary"]["mean_T"] for r in good])
    frame_hist = est.transmittance_stats(frame_T, k.bin_width_db)
    io.write_csv(out / "frame_mean_hist.csv", ["bin_low_db", "bin_high_db", "probability"],
                 [frame_hist.edges_db[:-1], frame_hist.edges_db[1:], frame_hist.probabilities])

    # average-T method: frames binned by their mean T, excess noise from the frame mean
    edges = est.bin_edges_db(*k.range_db, k.bin_width_db)
    fdb = 10 * np.log10(frame_T)
    fidx = np.digitize(fdb, edges) - 1
    eps_avg = np.array([r["summary"]["epsilon"]["residual_average_T"] for r in good])
    nb = len(edges) - 1
    p_avg = np.array([np.count_nonzero(fidx == b) for b in range(nb)]) / len(good)
    e_avg = np.array([np.mean(eps_avg[fidx == b]) if np.any(fidx == b) else np.nan for b in range(nb)])
    t_avg = np.array([np.mean(frame_T[fidx == b]) if np.any(fidx == b) else np.nan for b in range(nb)])
    # real-time method: every symbol binned by its own T estimate
    merged = merge_bins([r["bins"] for r in good])
    total = sum(r["summary"]["n_symbols"] for r in good)
    p_bin = merged.counts / max(total, 1)

    template = _skr_input(cfg, cfg.layout.v_a, 1.0, k.epsilon)
    rates = {}
    for name, p, t, e in (("average_T", p_avg, t_avg, e_avg), ("binned_T", p_bin, merged.t_mean, merged.epsilon)):
        ok = (p > 0) & np.isfinite(t) & np.isfinite(e)
        if not np.any(ok):
            rates[name] = {"R_final": 0.0, "bins": 0}
            continue
        binning = kr.TransmittanceBinning(10 * np.log10(t[ok]), p[ok], e[ok])
        r_final = kr.binned_final_rate(binning, template)
        rates[name] = {"R_final": r_final, "bins": int(np.count_nonzero(ok)),
                       "t_db": binning.t_db, "probability": binning.probability,
                       "epsilon": binning.epsilon, "R_T": binning.rates}
    agg.update(rates=rates, frame_T_stats={"centers_db": frame_hist.centers_db,
                                           "probabilities": frame_hist.probabilities},
               weibull_fit=None if stats_hat.fitted_weibull is None else vars(stats_hat.fitted_weibull),
               fading_noise=[r["summary"]["epsilon_f"] for r in good])
    return agg


def run_calibrate(cfg: ScenarioConfig, out: Path) -> dict:
    cal, info = calibrate(cfg)
    cal.save(out / "calibration.npz")
    # self-consistency: the calibration applied to its own record
    frame, rec = synthesize(cfg, np.ones(cfg.layout.n_samples), CALIBRATION_FRAME, excess=0.0)
    ref = rx.sync_reference(frame.quantum_symbols, cfg.layout, cfg.rx.sync_symbols)
    res = rx.receive_frame(rec, ref, cal, cfg=cfg.rx)
    info["self_T_max_deviation"] = float(np.max(np.abs(res.transmittance.T - 1)))
    io.write_json(out / "calibration.json", info)
    return {"calibration": info}


def run_channel_model(cfg: ScenarioConfig, out: Path) -> dict:
    t = cfg.turbulence
    model = t.model()
    n = t.trace_samples
    fs = cfg.layout.sample_rate
    rows = {"sample_index": [], "T": [], "theta_s": [], "theta_lo": []}
    frames = []
    for f in range(cfg.frames):
        T = ch.sample_beam_wander_trace(model, n, t.correlation_time, fs, cfg.seed, f)
        trace = channel_trace(cfg, T, f)
        rows["sample_index"].append(np.arange(n) + f * n)
        rows["T"].append(trace.T)
        rows["theta_s"].append(trace.theta_s)
        rows["theta_lo"].append(trace.theta_lo)
        frames.append({"frame": f, "mean_T": float(np.mean(T)), "mean_T_db": float(10 * np.log10(np.mean(T)))})
    cols = {k: np.concatenate(v) for k, v in rows.items()}
    io.write_numeric_csv(out / "channel_trace.csv", list(cols), list(cols.values()))
    T_all = cols["T"]
    amp = np.sqrt(T_all / model.loss_factor)
    grid = np.linspace(0, model.t0, 401)[1:]
    pdf = ch.transmittance_pdf(grid, model) if model.beam_wander_variance > 0 else np.zeros_like(grid)
    io.write_csv(out / "transmittance_pdf.csv", ["T_amplitude", "pdf"], [grid, pdf])
    st = est.transmittance_stats(T_all, cfg.keyrate.bin_width_db, model=model)
    io.write_csv(out / "transmittance_hist.csv", ["bin_low_db", "bin_high_db", "probability"],
                 [st.edges_db[:-1], st.edges_db[1:], st.probabilities])
    summary = {"turbulence": model.to_dict(), "frames": frames,
               "mean_amplitude": float(np.mean(amp)),
               "weibull_fit": None if st.fitted_weibull is None else vars(st.fitted_weibull)}
    io.write_json(out / "turbulence.json", summary)
    return summary


def sweep_dataset(cfg: ScenarioConfig) -> list[np.ndarray]:
    """Symbol-rate power-transmittance traces, one per frame, normalised to unit mean."""
    t = cfg.turbulence
    model = t.model(extra_loss_db=0.0)
    traces = [ch.sample_beam_wander_trace(model, cfg.keyrate.sweep_samples, t.correlation_time,
                                          cfg.layout.symbol_rate, cfg.seed, f) for f in range(cfg.frames)]
    scale = float(np.mean(np.concatenate(traces)))
    return [tr / scale for tr in traces]


def sweep_rates(cfg: ScenarioConfig, traces: list[np.ndarray], loss_db: float, eps_sys: float) -> dict:
    """Both rate methods for one mean loss on the same scaled dataset.

    The fading contribution to the excess noise is Var(sqrt(T))(V_A - 1)/T
    evaluated per frame (average method) or per 1 dB bin of the instantaneous
    transmittance (binned method).
    """
    k = cfg.keyrate
    v_a = k.v_a
    g = 10 ** (loss_db / 10)
    tr = [np.minimum(x * g, 1.0) for x in traces]
    template = _skr_input(cfg, v_a, 1.0, eps_sys)
    t_f = np.array([np.mean(x) for x in tr])
    e_f = np.array([eps_sys + est.sqrt_t_variance(x) * (v_a - 1) / np.mean(x) for x in tr])
    r_f = np.array([kr.secret_key_rate(template.replace(T=float(t), epsilon=float(e))).R for t, e in zip(t_f, e_f)])
    avg = {"T_db": float(10 * np.log10(np.mean(t_f))), "epsilon": float(np.mean(e_f)), "R": float(np.mean(r_f))}
    allT = np.concatenate(tr)
    db = 10 * np.log10(allT)
    lo = np.floor(db.min() / k.bin_width_db) * k.bin_width_db
    hi = np.ceil(db.max() / k.bin_width_db) * k.bin_width_db + (k.bin_width_db if db.max() % k.bin_width_db == 0 else 0)
    edges = est.bin_edges_db(lo, max(hi, lo + k.bin_width_db), k.bin_width_db)
    idx = np.clip(np.digitize(db, edges) - 1, 0, len(edges) - 2)
    tb, eb, pb = [], [], []
    for b in range(len(edges) - 1):
        sel = allT[idx == b]
        if sel.size == 0:
            continue
        tb.append(np.mean(sel))
        eb.append(eps_sys + est.sqrt_t_variance(sel) * (v_a - 1) / np.mean(sel))
        pb.append(sel.size / allT.size)
    binning = kr.TransmittanceBinning(10 * np.log10(tb), pb, eb)
    r_bin = kr.binned_final_rate(binning, template)
    binned = {"T_db": float(10 * np.log10(np.mean(allT))), "epsilon": float(np.dot(pb, eb)), "R": r_bin}
    for d in (avg, binned):
        rep = kr.secret_key_rate(template.replace(T=10 ** (d["T_db"] / 10), epsilon=d["epsilon"]))
        d["I_AB"], d["kappa_BE"] = rep.I_AB, rep.kappa_BE
    return {"average_T": avg, "binned_T": binned}


def sweep_grid(cfg: ScenarioConfig) -> np.ndarray:
    lo, hi, step = cfg.keyrate.grid_db
    if step <= 0:
        raise ConfigurationError("sweep step must be positive")
    n = int(round((hi - lo) / step)) + 1 if hi > lo else 1
    return lo + step * np.arange(n)


def run_keyrate_sweep(cfg: ScenarioConfig, out: Path) -> dict:
    traces = sweep_dataset(cfg)
    rows, points = [], []
    for loss in sweep_grid(cfg):
        res = sweep_rates(cfg, traces, float(loss), cfg.keyrate.epsilon)
        for method in ("average_T", "binned_T"):
            r = res[method]
            rows.append([method, float(loss), r["T_db"], r["epsilon"], r["I_AB"], r["kappa_BE"], r["R"]])
        points.append({"grid_db": float(loss), **res})
    io.write_rows(out / "sweep.csv", ["method", "grid_db", "T_db", "epsilon", "I_AB", "kappa_BE", "R"], rows)
    gaps = [p["binned_T"]["R"] - p["average_T"]["R"] for p in points]
    return {"points": points, "rate_gap": gaps,
            "fading_std_sqrt_T": [float(np.std(np.sqrt(x))) for x in traces]}


def run_keyrate(cfg: ScenarioConfig, out: Path, t_db: Optional[float] = None,
                epsilon: Optional[float] = None) -> dict:
    k = cfg.keyrate
    losses = [t_db] if t_db is not None else [-abs(x) for x in cfg.losses_db]
    eps = k.epsilon if epsilon is None else epsilon
    reports, rows = [], []
    for d in losses:
        rep = kr.secret_key_rate(_skr_input(cfg, k.v_a, 10 ** (d / 10), eps))
        reports.append({"T_db": d, "epsilon": eps, **rep.to_dict()})
        rows.append([d, eps, rep.I_AB, rep.kappa_BE, rep.R])
    io.write_rows(out / "keyrate.csv", ["T_db", "epsilon", "I_AB", "kappa_BE", "R"], rows)
    io.write_json(out / "keyrate.json", reports)
    return {"reports": reports}


RUNNERS = {
    "calibrate": run_calibrate,
    "fixed_loss": run_fixed_loss,
    "turbulence": run_turbulence,
    "channel_model": run_channel_model,
    "keyrate_sweep": run_keyrate_sweep,
}


def write_manifest(cfg: ScenarioConfig, out: Path, payload: dict) -> dict:
    files = {}
    for p in sorted(out.iterdir()):
        if p.is_file() and p.name != "manifest.json":
            files[p.name] = io.sha256_file(p)
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.hash(), "versions": versions(),
                "results": payload, "files": files}
    io.write_json(out / "manifest.json", manifest)
    return manifest


def run_scenario(cfg: ScenarioConfig, runner: Optional[Callable] = None, **kw) -> dict:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fn = runner or RUNNERS[cfg.scenario]
    payload = fn(cfg, out, **kw)
    return write_manifest(cfg, out, payload)


def verify_manifest(out_dir) -> list[str]:
    """Names of files whose checksum no longer matches the manifest."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    return [name for name, digest in manifest["files"].items()
            if not (out / name).exists() or io.sha256_file(out / name) != digest]
