"""End-to-end steps shared by the command line, scripts and tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis as A
from . import model as M
from . import synth as S
from . import tensor as tn
from . import train as T
from .config import RunConfig
from .dataset import InsufficientDataError, NormalizationSpec, RawData, WindowBatcher, WindowSource, ingest, split_and_normalize
from .graph import RoadGraph, hop_masks, load_graph, save_graph, stack_masks

log = logging.getLogger(__name__)


# ----------------------------------------------------------------- simulate


@dataclass
class SimulationSummary:
    n_nodes: int
    n_steps: int
    n_incidents: int
    out_dir: Path


def build_scenario(cfg: RunConfig) -> S.SyntheticScenario:
    sc = cfg.scenario
    seed = cfg.scenario_seed
    graph = S.corridor_network(sc.nodes, seed, sc.corridor_len, sc.link_spacing)
    horizon = sc.days * S.STEPS_PER_DAY
    incidents = S.random_incidents(graph, horizon, sc.incidents, seed) if sc.incidents else []
    return S.SyntheticScenario(graph, horizon, S.free_flow_for(graph), incidents=incidents,
                               noise_sigma=sc.noise_sigma, seed=seed, feature_schema=sc.feature_schema)


def simulate(cfg: RunConfig, out_dir: Path | None = None) -> SimulationSummary:
    """Generate the configured scenario and write it as a dataset directory."""
    out = Path(out_dir) if out_dir is not None else cfg.data.dir
    scenario = build_scenario(cfg)
    speeds, features = S.generate(scenario)
    g = scenario.graph
    out.mkdir(parents=True, exist_ok=True)
    save_graph(g, out)
    S.export_dataset(speeds, features, out, g.node_ids, scenario.feature_names)
    S.write_incidents(out / "incidents.csv", scenario.incidents, g.node_ids)
    return SimulationSummary(g.n_nodes, scenario.horizon, len(scenario.incidents), out)


# ------------------------------------------------------------------ dataset


@dataclass
class Dataset:
    graph: RoadGraph
    raw: RawData
    train: WindowSource
    val: WindowSource
    test: WindowSource
    norm: NormalizationSpec
    incidents: list[S.IncidentEvent]
    history: int
    horizon: int

    def rings(self, max_hops: int) -> np.ndarray:
        return stack_masks(hop_masks(self.graph, max_hops))

    def batcher(self, split: str, stride: int = 1) -> WindowBatcher:
        return WindowBatcher(getattr(self, split), self.history, self.horizon, stride)

    @property
    def feature_layout_text(self) -> str:
        return ";".join(f"{name}:{','.join(map(str, cols))}" for name, cols in self.norm.feature_layout())


def load_dataset(cfg: RunConfig, data_dir: Path | None = None) -> Dataset:
    d = Path(data_dir) if data_dir is not None else cfg.data.dir
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist (run 'simulate' first?)")
    graph = load_graph(d)
    raw = ingest(d, graph)
    tr, va, te, norm = split_and_normalize(raw, cfg.ratios, cfg.data.history, cfg.data.horizon)
    inc_path = d / "incidents.csv"
    incidents = S.read_incidents(inc_path, graph) if inc_path.exists() else []
    return Dataset(graph, raw, tr, va, te, norm, incidents, cfg.data.history, cfg.data.horizon)


def hyper_for(cfg: RunConfig, ds: Dataset) -> M.Hyper:
    return cfg.hyper(ds.graph.n_nodes, ds.raw.speeds.shape[-1], ds.norm.expanded_width, ds.feature_layout_text)


def check_compatible(params: M.ModelParams, ds: Dataset) -> None:
    """Raise :class:`ConfigError` when a checkpoint cannot run on ``ds``."""
    h = params.hyper
    want = {"n_nodes": ds.graph.n_nodes, "history": ds.history, "horizon": ds.horizon,
            "n_states": ds.raw.speeds.shape[-1], "n_features": ds.norm.expanded_width}
    for key, value in want.items():
        if getattr(h, key) != value:
            raise M.ConfigError(f"checkpoint has {key}={getattr(h, key)}, dataset/config needs {value}")


# -------------------------------------------------------------------- train


def train_model(cfg: RunConfig, ds: Dataset, variant: str | None = None) -> T.TrainResult:
    variant = variant or cfg.model.variant
    h = hyper_for(cfg, ds)
    params = M.init(variant, h)
    rings = ds.rings(h.max_hops)
    log.info("training %s: %d parameters", variant, params.n_parameters())
    return T.train(params, ds.batcher("train", cfg.data.train_stride), ds.batcher("val"),
                   cfg.train_config(), rings)


def validation_mse(params: M.ModelParams, ds: Dataset) -> float:
    return T.mean_squared_error(params, ds.batcher("val"), ds.rings(params.hyper.max_hops))


def evaluate(params: M.ModelParams, ds: Dataset, split: str = "test", zero_features: bool = False) -> T.EvalReport:
    check_compatible(params, ds)
    pred, target = T.predict_windows(params, ds.batcher(split), ds.rings(params.hyper.max_hops),
                                     zero_features=zero_features)
    return T.report_from_predictions(pred, target, ds.norm)


def incident_mask(ds: Dataset, batcher: WindowBatcher, max_hops: int) -> np.ndarray:
    """``[W, T, N]`` flags: target step inside an incident at a node whose
    hop neighbourhood (up to ``max_hops``, itself included) holds the incident node."""
    reach = ds.rings(max_hops).any(axis=0)  # reach[i, k]: k within max_hops downstream of i
    active = np.zeros((ds.raw.n_steps, ds.graph.n_nodes), dtype=bool)
    for ev in ds.incidents:
        active[ev.start:ev.end] |= reach[:, ev.node]
    when = batcher.t0[:, None] + ds.history + np.arange(ds.horizon)[None, :]
    return active[when]


def incident_mae(params: M.ModelParams, ds: Dataset, zero_features: bool = False, split: str = "test") -> float:
    """MAE (mph) restricted to :func:`incident_mask` elements of ``split``."""
    check_compatible(params, ds)
    b = ds.batcher(split)
    pred, target = T.predict_windows(params, b, ds.rings(params.hyper.max_hops), zero_features=zero_features)
    mask = incident_mask(ds, b, params.hyper.max_hops)
    if not mask.any():
        raise InsufficientDataError(f"no incident steps in the {split} split")
    err = np.abs(ds.norm.denormalize_states(pred[..., 0]) - ds.norm.denormalize_states(target[..., 0]))
    return float(np.mean(err[mask]))


# ------------------------------------------------------------------ analyze


def mean_attention(params: M.ModelParams, batcher: WindowBatcher, rings: np.ndarray,
                   batch_size: int = 256) -> list[np.ndarray]:
    """Per-ring propagation matrices averaged over all windows (and steps)."""
    total, count = None, 0
    with tn.no_grad():
        for x, z, _ in batcher.batches(batch_size):
            atts = M.attention(params, x, z, rings)
            sums = [a.data.reshape((-1,) + a.shape[-2:]).sum(axis=0) for a in atts]
            count += int(np.prod(atts[0].shape[:-2]))
            total = sums if total is None else [t + s for t, s in zip(total, sums)]
    return [t / count for t in total]


def incident_flags(ds: Dataset, node: int) -> np.ndarray:
    """The generator's I channel for one node, or zeros when absent."""
    if "I" in ds.raw.feature_names:
        return ds.raw.features[:, node, ds.raw.feature_names.index("I")]
    flags = np.zeros(ds.raw.n_steps)
    for ev in ds.incidents:
        if ev.node == node:
            flags[ev.start:ev.end] = 1
    return flags


def forecast_series(params: M.ModelParams, ds: Dataset, split: str = "test", step: int = 1) -> np.ndarray:
    """``[T_total, N]`` mph series of ``step``-ahead forecasts placed at their target time; NaN elsewhere."""
    b = ds.batcher(split)
    pred, _ = T.predict_windows(params, b, ds.rings(params.hyper.max_hops))
    out = np.full((ds.raw.n_steps, ds.graph.n_nodes), np.nan)
    when = b.t0 + ds.history + step - 1
    out[when] = ds.norm.denormalize_states(pred[:, step - 1, :, 0])
    return out


def incidents_in_test_split(ds: Dataset, margin: int) -> list[S.IncidentEvent]:
    lo = ds.test.offset
    hi = lo + len(ds.test)
    return [ev for ev in ds.incidents if ev.start - margin >= lo and ev.end + margin <= hi]


@dataclass
class AnalysisOutput:
    norms: A.NormReport | None
    links: A.SignificantLinks
    cases: list[A.CaseRecord]


def analyze(params: M.ModelParams, ds: Dataset, percentile: float = 95.0, margin: int = 12,
            case_horizon: int = 1) -> AnalysisOutput:
    check_compatible(params, ds)
    h = params.hyper
    rings = ds.rings(h.max_hops)
    b = ds.batcher("test")
    norms = None
    if params.variant == "rcdgcn":
        x, z, _ = b.gather(np.arange(len(b)))
        norms = A.factor_norms(params.tab, h.factor_layout(), ds.graph.node_ids, x[:, -1], z[:, -1])
    else:
        log.warning("%s checkpoint has no TAB weights; factor norms skipped", params.variant)
    att = A.combine_rings(mean_attention(params, b, rings), rings, h.attention_mode)
    links = A.significant_links(att, ds.graph.node_ids, percentile)
    series = forecast_series(params, ds, "test", case_horizon)
    truth = ds.raw.speeds[:, :, 0]
    cases = [A.extract_case(series[:, ev.node], truth[:, ev.node], ev, margin, incident_flags(ds, ev.node))
             for ev in incidents_in_test_split(ds, margin)]
    return AnalysisOutput(norms, links, cases)


def write_analysis(out: AnalysisOutput, out_dir: Path, node_ids) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if out.norms is not None:
        A.write_matrix_norms(out_dir / "norms_matrix.csv", out.norms)
        A.write_link_norms(out_dir / "norms_link.csv", out.norms)
        written += [out_dir / "norms_matrix.csv", out_dir / "norms_link.csv"]
    A.write_significant_links(out_dir / "significant_links.csv", out.links)
    written.append(out_dir / "significant_links.csv")
    case_dir = out_dir / "cases"
    case_dir.mkdir(exist_ok=True)
    for k, case in enumerate(out.cases):
        path = case_dir / f"case_{k:03d}_{node_ids[case.incident.node]}.csv"
        A.write_case(path, case)
        written.append(path)
    A.write_case_summary(out_dir / "cases_summary.csv", out.cases, node_ids)
    written.append(out_dir / "cases_summary.csv")
    return written
