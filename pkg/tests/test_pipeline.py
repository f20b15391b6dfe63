import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from keepcore import pipeline
from keepcore.augment import AugmentSpec
from keepcore.data import DatasetManifest, SyntheticTask, load_maps, synth_dataset
from keepcore.errors import ConfigError, DataError, ShapeError
from keepcore.formats import read_pnm, save_tensor, write_pgm
from keepcore.keep import KeepConfig
from keepcore.oracle import ORACLE_SEEDS, OracleNet, default_layers, load_weights
from keepcore.pipeline import TOY_SAGE_PENALTY, RunConfig, generate_maps, render_map
from keepcore.sage import ImportanceMap, SageConfig, brute_force_importance, run_sage
from keepcore.training import TrainingConfig, train_oracle, train_with_keep

TINY = {
    "seed": 5,
    "outputs": "out",
    "data": {"n": 10, "synthetic": {"image_size": 16, "token_size": 4, "radius": [1.0, 1.5], "jitter": 0}},
    "training": {"epochs": 2, "batch": 4, "width": 4, "depth": 2},
    "sage": {"steps": 8},
}
TINY_TRAIN = TrainingConfig(epochs=2, batch=4, width=4, depth=2)


def tiny_config(tmp_path, **over) -> RunConfig:
    raw = json.loads(json.dumps(TINY))
    raw.update(over)
    (tmp_path / "run.json").write_text(json.dumps(raw))
    return RunConfig.load(tmp_path / "run.json")


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    m = synth_dataset(SyntheticTask(seed=1, image_size=16, token_size=4, radius=(1.0, 1.5), jitter=0), 10, root)
    net = train_oracle(m, TINY_TRAIN, "oracle-A", 3).net
    return m, net


# --- config ------------------------------------------------------------------

def test_config_defaults():
    cfg = RunConfig.from_dict({})
    assert cfg.training == TrainingConfig() and cfg.training.epochs == 50 and cfg.training.batch == 16
    assert cfg.training.lr == 1e-3 and cfg.sage.epsilon == 0.05 and cfg.sage.token_size == 16
    assert cfg.keep.tau_core == 0.6 and cfg.augment.kind == "gaussian_noise" and cfg.mode == "keep_core"
    assert cfg.oracle_seed == ORACLE_SEEDS["oracle-A"]
    assert cfg.sage.mu_sparse == cfg.sage.beta_delta == TOY_SAGE_PENALTY
    assert RunConfig().sage == replace(cfg.sage, seed=0)
    assert cfg.manifest_path == Path("outputs/data/manifest.json")


def test_top_level_seed_reaches_components():
    cfg = RunConfig.from_dict({"seed": 7, "oracle": {"id": "oracle-B"}, "keep": {"seed": 99}})
    assert cfg.task.seed == cfg.training.seed == cfg.sage.seed == 7
    assert cfg.keep.seed == 99
    assert cfg.oracle_seed == ORACLE_SEEDS["oracle-B"] + 7
    assert RunConfig.from_dict({"seed": 7}, seed=8).task.seed == 8


def test_relative_paths_follow_config_dir(tmp_path):
    cfg = tiny_config(tmp_path, data={"manifest": "d/m.json"}, oracle={"weights": "w.kco"})
    assert cfg.outputs == tmp_path / "out"
    assert cfg.manifest_path == tmp_path / "d/m.json" and cfg.weights_path == tmp_path / "w.kco"


def test_sage_token_size_follows_task():
    cfg = RunConfig.from_dict(TINY)
    assert cfg.sage.token_size == 4


@pytest.mark.parametrize("raw", [{"bogus": 1}, {"training": {"epoch": 3}}, {"mode": "fancy"}, {"workers": 0},
                                 {"sage": {"token_size": 7}}, {"data": {"n": 0}}, {"augment": {"kind": "warp"}},
                                 {"keep": {"tau_core": 0}}, {"oracle": {"name": "x"}}, {"data": {"size": 3}},
                                 []])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")


# --- map generation ----------------------------------------------------------

def test_maps_independent_of_worker_count(tiny_data, tmp_path):
    m, net = tiny_data
    cfg = SageConfig(token_size=4, steps=8)
    a = generate_maps(m, net, cfg, tmp_path / "w1", workers=1, base_seed=3)
    b = generate_maps(m, net, cfg, tmp_path / "w4", workers=4, base_seed=3)
    assert a.ok and b.ok and len(a.written) == 10
    assert tree_bytes(tmp_path / "w1") == tree_bytes(tmp_path / "w4")


def test_maps_match_manifest(tiny_data, tmp_path):
    m, net = tiny_data
    generate_maps(m, net, SageConfig(token_size=4, steps=4), tmp_path)
    index = json.loads((tmp_path / "index.json").read_text())
    assert index["oracle_id"] == "oracle-A" and index["oracle_sha256"] == net.weights_hash()
    maps = load_maps(m, tmp_path)
    assert sorted(maps) == sorted(e.image_id for e in m.entries)
    for image_id, imap in maps.items():
        assert imap.source_image_id == image_id and imap.grid.shape == (4, 4)


def test_empty_manifest_gives_empty_archive(tiny_data, tmp_path):
    _, net = tiny_data
    arc = generate_maps(DatasetManifest([], 2, root=tmp_path), net, SageConfig(token_size=4), tmp_path / "maps")
    assert arc.ok and arc.written == []
    assert json.loads((tmp_path / "maps" / "index.json").read_text())["maps"] == []


def test_per_image_failures_are_recorded(tiny_data, tmp_path):
    m, net = tiny_data
    save_tensor(tmp_path / "odd.kct", np.zeros((1, 10, 10)))
    write_pgm(tmp_path / "odd.pgm", np.zeros((10, 10), np.uint8))
    entries = list(m.entries[:2])
    entries = [replace(e, image=str(m.resolve(e.image)), label=str(m.resolve(e.label))) for e in entries]
    from keepcore.data import ManifestEntry
    entries.append(ManifestEntry("odd", "odd.kct", "odd.pgm"))
    mixed = DatasetManifest(entries, 2, root=tmp_path)
    arc = generate_maps(mixed, net, SageConfig(token_size=4, steps=2), tmp_path / "maps")
    assert not arc.ok and set(arc.failures) == {"odd"} and len(arc.written) == 2
    assert "ShapeError" in arc.failures["odd"]
    index = json.loads((tmp_path / "maps" / "index.json").read_text())
    assert index["failures"][0]["image_id"] == "odd"


def test_unfrozen_oracle_rejected(tiny_data, tmp_path):
    m, _ = tiny_data
    net = OracleNet.init(default_layers(1, 2, 4, 2), 2, 0)
    with pytest.raises(RuntimeError):
        generate_maps(m, net, SageConfig(token_size=4), tmp_path)


# --- rendering ---------------------------------------------------------------

def test_render_constant_map_is_mid_gray(tmp_path):
    raster = render_map(ImportanceMap(np.full((2, 3), 0.5), 4), tmp_path / "w.pgm")
    assert raster.shape == (8, 12) and np.all(raster == 128)
    assert np.array_equal(read_pnm(tmp_path / "w.pgm"), raster)


def test_render_one_hot_gives_one_white_block(tmp_path):
    grid = np.zeros((4, 4))
    grid[1, 1] = 1.0
    render_map(ImportanceMap(grid, 16), tmp_path / "w.pgm")
    img = read_pnm(tmp_path / "w.pgm")
    expected = np.zeros((64, 64), np.uint8)
    expected[16:32, 16:32] = 255
    assert np.array_equal(img, expected)


def test_render_header_and_payload(tmp_path):
    render_map(ImportanceMap(np.random.default_rng(0).uniform(size=(3, 2)), 5), tmp_path / "w.pgm")
    raw = (tmp_path / "w.pgm").read_bytes()
    header = b"P5\n10 15\n255\n"
    assert raw.startswith(header) and len(raw) == len(header) + 150


def test_render_overlay(tmp_path):
    grid = np.zeros((2, 2))
    grid[0, 1] = 1.0
    img = np.full((1, 4, 4), 0.4)
    raster = render_map(ImportanceMap(grid, 2), tmp_path / "o.ppm", img)
    assert raster.shape == (4, 4, 3)
    assert raster[0, 3].tolist() == [179, 51, 51]  # 0.5*0.4 + 0.5 in red
    assert raster[3, 0].tolist() == [51, 51, 51]
    assert np.array_equal(read_pnm(tmp_path / "o.ppm"), raster)


def test_render_overlay_size_mismatch(tmp_path):
    with pytest.raises(ShapeError):
        render_map(ImportanceMap(np.zeros((2, 2)), 2), tmp_path / "o.ppm", np.zeros((1, 5, 4)))


# --- training ----------------------------------------------------------------

def test_smoke_one_epoch_four_samples(tmp_path):
    m = synth_dataset(SyntheticTask(image_size=16, token_size=4, radius=(1.0, 1.5), jitter=0), 4, tmp_path)
    rep = train_oracle(m, TrainingConfig(epochs=1, width=4, depth=2))
    from keepcore.oracle import save_weights
    save_weights(rep.net, tmp_path / "o.kco")
    back = load_weights(tmp_path / "o.kco")
    assert back.frozen and back.weights_hash() == rep.net.weights_hash()
    assert not rep.converged and len(rep.history) == 1


def test_training_is_deterministic(tiny_data):
    m, _ = tiny_data
    a = train_oracle(m, TINY_TRAIN, "oracle-A", 3).net
    b = train_oracle(m, TINY_TRAIN, "oracle-A", 3).net
    assert a.weights_hash() == b.weights_hash()


def test_identity_baseline_reproduces_oracle_training(tiny_data):
    m, _ = tiny_data
    rep = train_with_keep(m, TINY_TRAIN, AugmentSpec("identity"), "baseline_aug", split_seed=2, init_seed=3)
    ref = train_oracle(m.subset(rep.split[0]), TINY_TRAIN, "model-baseline_aug", 3).net
    assert rep.fit.final.weights_hash() == ref.weights_hash()


def test_full_restore_equals_identity_baseline(tiny_data, tmp_path):
    m, net = tiny_data
    arc = generate_maps(m, net, SageConfig(token_size=4, steps=4), tmp_path)
    maps = load_maps(m, arc.out_dir)
    keep = train_with_keep(m, TINY_TRAIN, AugmentSpec("gaussian_noise"), "keep_core", maps,
                           KeepConfig(tau_core=1.0, tau_low=0.0))
    base = train_with_keep(m, TINY_TRAIN, AugmentSpec("identity"), "baseline_aug")
    assert keep.fit.final.weights_hash() == base.fit.final.weights_hash()
    assert [r["dice"] for r in keep.rows] == [r["dice"] for r in base.rows]


def test_modes_share_splits_and_order(tiny_data, tmp_path):
    m, net = tiny_data
    maps = load_maps(m, generate_maps(m, net, SageConfig(token_size=4, steps=4), tmp_path).out_dir)
    a = train_with_keep(m, TINY_TRAIN, AugmentSpec("cutout"), "keep_core", maps)
    b = train_with_keep(m, TINY_TRAIN, AugmentSpec("cutout"), "baseline_aug")
    assert a.split == b.split
    assert a.fit.final.weights_hash() != b.fit.final.weights_hash()


def test_keep_core_without_maps_fails_early(tiny_data):
    m, _ = tiny_data
    with pytest.raises(DataError, match="importance maps"):
        train_with_keep(m, TINY_TRAIN, AugmentSpec("gaussian_noise"), "keep_core", {})


def test_report_columns(tiny_data):
    m, _ = tiny_data
    rep = train_with_keep(m, TINY_TRAIN, AugmentSpec("gaussian_noise"), "baseline_aug")
    header = rep.csv.splitlines()[0].split(",")
    assert header[:4] == ["mode", "augment", "class", "n"]
    assert header[4:8] == ["dice", "hd95", "asd", "iou"]
    assert header[8:12] == ["acc", "pre", "sen", "spe"]


def test_mixing_augmentations_train(tiny_data, tmp_path):
    m, net = tiny_data
    maps = load_maps(m, generate_maps(m, net, SageConfig(token_size=4, steps=2), tmp_path).out_dir)
    one = replace(TINY_TRAIN, epochs=1)
    for kind in ("mixup", "cutmix"):
        for mode in ("baseline_aug", "keep_core"):
            rep = train_with_keep(m, one, AugmentSpec(kind), mode, maps if mode == "keep_core" else None)
            assert np.isfinite(rep.fit.history[0]["loss"])


# --- stages ------------------------------------------------------------------

@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    root = tmp_path_factory.mktemp("staged")
    cfg = tiny_config(root)
    pipeline.stage_synth(cfg)
    pipeline.stage_train_oracle(cfg)
    pipeline.stage_sage(cfg)
    return cfg


def test_stage_outputs(staged):
    cfg = staged
    assert cfg.manifest_path.exists() and cfg.weights_path.exists()
    assert len(list(cfg.maps_dir.glob("*.kcw"))) == 10
    report = json.loads((cfg.reports_dir / "oracle.json").read_text())
    assert report["oracle_id"] == "oracle-A" and "converged" in report


def test_stage_keep_aug(staged):
    ids = pipeline.stage_keep_aug(staged, epoch=1)
    out = staged.outputs / "keep_aug"
    assert len(ids) == 6
    side = json.loads((out / f"{ids[0]}.json").read_text())
    assert len(side["core"]) == 10 and side["mask"] == [] and side["epoch"] == 1
    assert (out / f"{ids[0]}.kct").exists() and (out / f"{ids[0]}.label.pgm").exists()


def test_stage_keep_aug_needs_maps(staged, tmp_path):
    cfg = replace(staged, outputs=tmp_path, manifest=staged.manifest_path)
    with pytest.raises(DataError):
        pipeline.stage_keep_aug(cfg)


def test_stage_train_and_eval(staged, monkeypatch):
    rep = pipeline.stage_train(staged, "keep_core")
    assert staged.model_path("keep_core").exists()
    train_csv = (staged.reports_dir / "train-keep_core.csv").read_text()
    assert train_csv == rep.csv

    def no_maps(*a, **k):
        raise AssertionError("evaluation must not read importance maps")

    monkeypatch.setattr(ImportanceMap, "load", no_maps)
    monkeypatch.setattr(pipeline, "load_maps", no_maps)
    rows = pipeline.stage_eval(staged, "keep_core")
    assert [r["class"] for r in rows] == [0, 1]
    # the held-out metrics match what training reported
    assert (staged.reports_dir / "eval-keep_core.csv").read_text() == train_csv


def test_stage_eval_missing_weights(staged, tmp_path):
    with pytest.raises(DataError):
        pipeline.stage_eval(staged, "baseline_aug", tmp_path / "none.kco")


# --- trained-oracle checks on the default task -------------------------------

@pytest.fixture(scope="module")
def trained_oracles(tmp_path_factory):
    cfg = RunConfig()
    m = synth_dataset(cfg.task, cfg.num_samples, tmp_path_factory.mktemp("default"))
    nets = {k: train_oracle(m, cfg.oracle_training, k, ORACLE_SEEDS[k]).net for k in ORACLE_SEEDS}
    picked = m.load_samples()[:16]
    brute = {k: [brute_force_importance(net, s.x, s.y, cfg.sage.epsilon, cfg.task.token_size).grid for s in picked]
             for k, net in nets.items()}
    return picked, nets, brute


def _top1(grid):
    return tuple(int(v) for v in np.unravel_index(np.argmax(grid), grid.shape))


@pytest.mark.slow
def test_brute_force_finds_planted_core(trained_oracles):
    samples, _, brute = trained_oracles
    for grids in brute.values():
        assert np.mean([_top1(g) == s.core_token for g, s in zip(grids, samples)]) >= 0.8


@pytest.mark.slow
def test_default_sage_tracks_brute_force_on_both_oracles(trained_oracles):
    from scipy.stats import spearmanr
    samples, nets, brute = trained_oracles
    cfg = RunConfig().sage
    grids = {}
    for k, net in nets.items():
        grids[k] = [run_sage(net, s.x, s.y, cfg, s.image_id).grid for s in samples]
        rho = [spearmanr(g.ravel(), b.ravel())[0] for g, b in zip(grids[k], brute[k])]
        assert np.mean(rho) >= 0.5
        assert np.mean([_top1(g) == s.core_token for g, s in zip(grids[k], samples)]) > 0.5
    # the two oracles give different maps for the same images
    assert any(not np.array_equal(a, b) for a, b in zip(grids["oracle-A"], grids["oracle-B"]))
