from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from cvqkd_sim import rx
from cvqkd_sim import scenarios as sc
from cvqkd_sim.channel import DetectorModel
from cvqkd_sim.config import ChannelConfig, ImbalanceConfig, ScenarioConfig
from cvqkd_sim.dsp import FrameLayout

# criterion number -> (passed, message); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {msg}")


def make_cfg(n_symbols=100_000, seed=7, eta=0.56, nu_el=0.1, noiseless=False, excess=0.0,
             delta_f=0.0, linewidth=0.0, d=1.0, theta_deg=0.0, **rx_kw) -> ScenarioConfig:
    cfg = ScenarioConfig(seed=seed, layout=FrameLayout(n_symbols=n_symbols),
                         detector=DetectorModel(eta, nu_el, 0, noiseless),
                         channel=ChannelConfig(delta_f, linewidth, 0.0, excess),
                         imbalance=ImbalanceConfig(d, theta_deg))
    if rx_kw:
        cfg = cfg.replace(rx=replace(cfg.rx, **rx_kw))
    return cfg


def run_chain(cfg: ScenarioConfig, T, frame_index=0, cal=None):
    """tx -> channel -> detector -> receiver; returns (frame, record, result)."""
    T = np.broadcast_to(np.asarray(T, dtype=float), (cfg.layout.n_samples,)).copy()
    frame, rec = sc.synthesize(cfg, T, frame_index)
    ref = rx.sync_reference(frame.quantum_symbols, cfg.layout, cfg.rx.sync_symbols)
    res = rx.receive_frame(rec, ref, cal, cfg=cfg.rx)
    return frame, rec, res


def tx_slice(frame, block):
    return frame.quantum_symbols.symbols[block.start:block.start + len(block)]


@pytest.fixture(scope="session")
def small_cfg():
    return make_cfg()


@pytest.fixture(scope="session")
def small_cal(small_cfg):
    return sc.calibrate(small_cfg)[0]
