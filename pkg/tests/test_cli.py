import json
import logging

import numpy as np
import pytest

from fmapkit.cli import Manifest, Workspace, load_config, main, match_pair
from fmapkit.convert import PointMap, read_pointmap, write_pointmap
from fmapkit.evaluate import mean_geodesic_error
from fmapkit.features import ExtractorConfig, TrainConfig, TrainState, load_checkpoint, save_checkpoint
from fmapkit.fmap import read_fmap
from fmapkit.mesh import load_mesh, normalize_mesh, save_off
from fmapkit.spectral import mesh_basis, project
from fmapkit.synthetic import bumpy, icosphere, rotate_about_axis, smooth_deform, uv_blob


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """Manifest with a blob, its permuted rotated copy and a deformed blob."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("FMAPKIT_CACHE", raising=False)
    rng = np.random.default_rng(0)
    blob = normalize_mesh(bumpy(icosphere(2), rng))
    perm = rng.permutation(blob.n_vertices)
    copy = rotate_about_axis(blob.permuted(perm), 0.8)
    save_off(blob, tmp_path / "blob.off")
    save_off(copy, tmp_path / "copy.off")
    write_pointmap(PointMap(perm, blob.n_vertices), tmp_path / "copy_gt.p2p")
    write_pointmap(PointMap(np.arange(blob.n_vertices), blob.n_vertices), tmp_path / "self_gt.p2p")
    manifest = {
        "shapes": [{"id": "blob", "path": "blob.off"}, {"id": "copy", "path": "copy.off"}],
        "pairs": [
            {"source": "blob", "target": "blob", "id": "self", "gt": "self_gt.p2p"},
            {"source": "blob", "target": "copy", "gt": "copy_gt.p2p"},
        ],
    }
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    return tmp_path


@pytest.fixture
def train_workdir(tmp_path, monkeypatch):
    """Tiny training set: three deformations of a 62-vertex blob."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("FMAPKIT_CACHE", raising=False)
    base = normalize_mesh(uv_blob(6, 10))
    rng = np.random.default_rng(1)
    ident = PointMap(np.arange(base.n_vertices), base.n_vertices)
    write_pointmap(ident, tmp_path / "id.p2p")
    shapes, pairs = [], []
    for i in range(3):
        save_off(normalize_mesh(smooth_deform(base, rng, 0.3, 0.2, 0.05)), tmp_path / f"s{i}.off")
        shapes.append({"id": f"s{i}", "path": f"s{i}.off"})
    for i, j in [(0, 1), (1, 2), (2, 0)]:
        pairs.append({"source": f"s{i}", "target": f"s{j}", "gt": "id.p2p"})
    (tmp_path / "manifest.json").write_text(json.dumps({"shapes": shapes, "pairs": pairs}))
    extractor = dict(block_dims=[6, 8, 8], up_dims=[8, 5], kernel_size=7, base_cell=0.08)
    config = {"k": 10, "zoomout": {"k_final": 20, "step": 2}, "extractor": extractor, "train": {"batch_size": 2}}
    (tmp_path / "config.json").write_text(json.dumps(config))
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------------------
# precompute


def test_precompute_then_cached_then_invalidated(workdir, capsys):
    code, out, _ = run(capsys, "precompute", "--manifest", "manifest.json")
    assert code == 0 and out.strip() == "2 computed, 0 cached"
    assert sorted(p.name for p in (workdir / ".fmapkit_cache").glob("*.spec")) == ["blob.spec", "copy.spec"]
    code, out, _ = run(capsys, "precompute", "--manifest", "manifest.json")
    assert out.strip() == "0 computed, 2 cached"

    mesh = load_mesh(workdir / "copy.off")
    save_off(mesh.with_vertices(mesh.vertices * 1.01), workdir / "copy.off")
    code, out, _ = run(capsys, "precompute", "--manifest", "manifest.json")
    assert out.strip() == "1 computed, 1 cached"


def test_cache_dir_from_environment(workdir, capsys, monkeypatch):
    monkeypatch.setenv("FMAPKIT_CACHE", str(workdir / "elsewhere"))
    run(capsys, "precompute", "--manifest", "manifest.json")
    assert (workdir / "elsewhere" / "blob.spec").exists()


def test_cache_too_narrow_is_rebuilt(workdir, capsys):
    cfg = workdir / "narrow.json"
    cfg.write_text(json.dumps({"zoomout": {"k_final": 12}}))
    run(capsys, "precompute", "--manifest", "manifest.json", "--config", cfg, "--k", "10")
    # a wider cached basis serves a narrower request
    code, out, _ = run(capsys, "precompute", "--manifest", "manifest.json", "--config", cfg, "--k", "8")
    assert out.strip() == "0 computed, 2 cached"
    # the default refinement width needs more functions than were cached
    code, out, _ = run(capsys, "precompute", "--manifest", "manifest.json", "--k", "10")
    assert out.strip() == "2 computed, 0 cached"


# ---------------------------------------------------------------------------
# match and eval


def test_self_match_hks_zero_error(workdir, capsys):
    cfg = workdir / "hks.json"
    cfg.write_text(json.dumps({"descriptor": {"kind": "hks"}}))
    code, out, _ = run(capsys, "match", "self", "--manifest", "manifest.json", "--config", cfg, "--out", "out")
    assert code == 0 and "descriptor=hks" in out
    code, out, _ = run(capsys, "eval", "--pred", "out/self.p2p", "--gt", "self_gt.p2p", "--mesh", "blob.off", "--out", "ev")
    assert code == 0 and out.strip() == "0.0"
    report = json.loads((workdir / "ev" / "report.json").read_text())
    assert report["mean_error"] == 0 and report["pairs"] == 1
    assert (workdir / "ev" / "curve.txt").exists()


def test_permuted_rotated_copy_wks_zero_error(workdir, capsys):
    code, _, _ = run(capsys, "match", "blob-copy", "--manifest", "manifest.json", "--out", "out")
    assert code == 0
    code, out, _ = run(capsys, "eval", "--pred", "out/blob-copy.p2p", "--gt", "copy_gt.p2p", "--mesh", "blob.off", "--out", "ev")
    assert out.strip() == "0.0"


def test_lambda_precedence_is_echoed(workdir, capsys):
    cfg = workdir / "lam.json"
    cfg.write_text(json.dumps({"lambda": 0.5}))
    _, out, _ = run(capsys, "match", "self", "--manifest", "manifest.json", "--config", cfg, "--out", "o1")
    assert "lambda=0.5 (config)" in out
    _, out, _ = run(capsys, "match", "self", "--manifest", "manifest.json", "--config", cfg, "--lambda", "0.01", "--out", "o2")
    assert "lambda=0.01 (command line)" in out


def test_match_equals_library_pipeline(workdir, capsys):
    run(capsys, "match", "blob-copy", "--manifest", "manifest.json", "--out", "out")
    args = type("Args", (), {"config": None, "k": None, "lam": None, "seed": None})()
    ws = Workspace(load_config(args), Manifest(workdir / "manifest.json"))
    c, t = match_pair(ws, ws.manifest.pair("blob-copy"))
    np.testing.assert_array_equal(read_fmap(workdir / "out" / "blob-copy.fmap").c, c.c)
    np.testing.assert_array_equal(read_pointmap(workdir / "out" / "blob-copy.p2p").assignment, t.assignment)


def test_rerun_is_byte_identical(workdir, capsys):
    for out_dir in ("a", "b"):
        run(capsys, "match", "blob-copy", "--manifest", "manifest.json", "--out", out_dir)
    for name in ("blob-copy.fmap", "blob-copy.p2p"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()


def test_learned_descriptor_needs_checkpoint(workdir, capsys):
    cfg = workdir / "learned.json"
    cfg.write_text(json.dumps({"descriptor": {"kind": "learned"}}))
    code, _, err = run(capsys, "match", "self", "--manifest", "manifest.json", "--config", cfg)
    assert code == 2 and "checkpoint" in err


def test_unknown_pair_is_usage_error(workdir, capsys):
    code, _, err = run(capsys, "match", "nope", "--manifest", "manifest.json")
    assert code == 2 and "unknown pair" in err


def test_eval_single_wrong_vertex(workdir, capsys):
    gt = read_pointmap(workdir / "self_gt.p2p")
    pred = gt.assignment.copy()
    mesh = normalize_mesh(load_mesh(workdir / "blob.off"))
    pred[0] = mesh.faces[0][1] if mesh.faces[0][0] == 0 else 0
    neighbor = [f for f in mesh.faces if 0 in f][0]
    pred[0] = [v for v in neighbor if v != 0][0]
    write_pointmap(PointMap(pred, gt.n_source), workdir / "pred.p2p")
    run(capsys, "eval", "--pred", "pred.p2p", "--gt", "self_gt.p2p", "--mesh", "blob.off", "--out", "ev")
    edge = np.linalg.norm(mesh.vertices[0] - mesh.vertices[pred[0]])
    report = json.loads((workdir / "ev" / "report.json").read_text())
    assert report["mean_error"] == pytest.approx(edge / np.sqrt(mesh.area) / mesh.n_vertices, rel=1e-12)


def test_eval_missing_gt_exit_code(workdir, capsys):
    code, _, err = run(capsys, "eval", "--pred", "self_gt.p2p", "--gt", "missing.p2p", "--mesh", "blob.off")
    assert code == 2 and "missing.p2p" in err


def test_eval_length_mismatch(workdir, capsys):
    write_pointmap(PointMap([0, 1], 162), workdir / "short.p2p")
    code, _, err = run(capsys, "eval", "--pred", "short.p2p", "--gt", "self_gt.p2p", "--mesh", "blob.off")
    assert code == 2 and "entries" in err


def test_malformed_map_exit_code(workdir, capsys):
    (workdir / "bad.p2p").write_text("P2P 2\n")
    code, _, _ = run(capsys, "eval", "--pred", "bad.p2p", "--gt", "self_gt.p2p", "--mesh", "blob.off")
    assert code == 2


# ---------------------------------------------------------------------------
# refine


def test_refine_identity_zoomout_unchanged(workdir, capsys):
    run(capsys, "match", "self", "--manifest", "manifest.json", "--out", "out")
    code, _, _ = run(capsys, "refine", "self", "--manifest", "manifest.json", "--method", "zoomout",
                     "--p2p", "self_gt.p2p", "--k-final", "60", "--out", "out")
    assert code == 0
    c = read_fmap(workdir / "out" / "self.zoomout.fmap").c
    assert c.shape == (60, 60)
    np.testing.assert_allclose(c, np.eye(60), atol=1e-8)
    np.testing.assert_array_equal(read_pointmap(workdir / "out" / "self.zoomout.p2p").assignment, np.arange(162))


def test_refine_zoomout_reduces_error_of_noisy_map(workdir, capsys):
    gt = read_pointmap(workdir / "copy_gt.p2p")
    mesh = normalize_mesh(load_mesh(workdir / "blob.off"))
    rng = np.random.default_rng(3)
    noisy = gt.assignment.copy()
    wrong = rng.choice(len(noisy), size=len(noisy) // 5, replace=False)
    noisy[wrong] = rng.integers(0, gt.n_source, size=len(wrong))
    write_pointmap(PointMap(noisy, gt.n_source), workdir / "noisy.p2p")
    code, _, _ = run(capsys, "refine", "blob-copy", "--manifest", "manifest.json", "--method", "zoomout",
                     "--p2p", "noisy.p2p", "--k-final", "60", "--out", "out")
    assert code == 0
    refined = read_pointmap(workdir / "out" / "blob-copy.zoomout.p2p")
    assert mean_geodesic_error(refined, gt, mesh) < mean_geodesic_error(noisy, gt, mesh)


def test_refine_icp_iterations_flag(workdir, capsys, caplog):
    caplog.set_level(logging.INFO, logger="fmapkit")
    code, _, _ = run(capsys, "refine", "self", "--manifest", "manifest.json", "--method", "icp",
                     "--p2p", "self_gt.p2p", "--iterations", "3", "--out", "out")
    assert code == 0
    assert "icp: 3 iterations" in caplog.text
    c = read_fmap(workdir / "out" / "self.icp.fmap").c
    np.testing.assert_allclose(c.T @ c, np.eye(30), atol=1e-8)


def test_refine_basis_too_narrow(workdir, capsys):
    code, _, err = run(capsys, "refine", "self", "--manifest", "manifest.json", "--method", "zoomout",
                       "--p2p", "self_gt.p2p", "--k-final", "200")
    assert code == 2 and "need 200" in err


# ---------------------------------------------------------------------------
# train and export-desc


def test_train_zero_steps_writes_initialization(train_workdir, capsys):
    code, out, _ = run(capsys, "train", "--manifest", "manifest.json", "--config", "config.json", "--steps", "0", "--out", "t")
    assert code == 0
    cfg = TrainConfig(k=10, batch_size=2, extractor=ExtractorConfig(block_dims=[6, 8, 8], up_dims=[8, 5], kernel_size=7, base_cell=0.08))
    state = load_checkpoint(train_workdir / "t" / "checkpoint.kpw", cfg)
    assert state.step == 0
    np.testing.assert_array_equal(state.params, TrainState.initial(cfg).params)


def test_train_logs_and_resumes(train_workdir, capsys):
    code, _, _ = run(capsys, "train", "--manifest", "manifest.json", "--config", "config.json", "--steps", "3", "--out", "t")
    assert code == 0
    log = (train_workdir / "t" / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,loss,lr" and len(log) == 4
    code, out, _ = run(capsys, "train", "--manifest", "manifest.json", "--config", "config.json", "--steps", "2",
                       "--resume", "t/checkpoint.kpw", "--out", "t")
    assert code == 0 and "step 5" in out
    log = (train_workdir / "t" / "train_log.csv").read_text().splitlines()
    assert [row.split(",")[0] for row in log[1:]] == ["1", "2", "3", "4", "5"]

    # the resumed run equals an uninterrupted one
    run(capsys, "train", "--manifest", "manifest.json", "--config", "config.json", "--steps", "5", "--out", "u")
    assert (train_workdir / "t" / "checkpoint.kpw").read_bytes() == (train_workdir / "u" / "checkpoint.kpw").read_bytes()


def test_train_requires_ground_truth(train_workdir, capsys):
    doc = json.loads((train_workdir / "manifest.json").read_text())
    del doc["pairs"][0]["gt"]
    (train_workdir / "manifest.json").write_text(json.dumps(doc))
    code, _, err = run(capsys, "train", "--manifest", "manifest.json", "--config", "config.json", "--steps", "1")
    assert code == 2 and "ground truth" in err


def test_export_descriptors(train_workdir, capsys):
    run(capsys, "train", "--manifest", "manifest.json", "--config", "config.json", "--steps", "1", "--out", "t")
    code, _, _ = run(capsys, "export-desc", "s0", "--manifest", "manifest.json", "--config", "config.json",
                     "--checkpoint", "t/checkpoint.kpw", "--channels", "0", "3", "--out", "d")
    assert code == 0
    field = np.loadtxt(train_workdir / "d" / "s0.desc3.txt")
    recon = np.loadtxt(train_workdir / "d" / "s0.desc3.recon.txt")
    mesh = normalize_mesh(load_mesh(train_workdir / "s0.off"))
    assert field.shape == (mesh.n_vertices,)
    basis = mesh_basis(mesh, 10)
    np.testing.assert_allclose(recon, basis.phi @ project(basis, field)[:, 0], atol=1e-6)


def test_export_zero_checkpoint_is_zero(train_workdir, capsys):
    cfg = TrainConfig(k=10, batch_size=2, extractor=ExtractorConfig(block_dims=[6, 8, 8], up_dims=[8, 5], kernel_size=7, base_cell=0.08))
    state = TrainState.initial(cfg)
    state.params[:] = 0
    save_checkpoint(state, train_workdir / "zero.kpw")
    code, _, _ = run(capsys, "export-desc", "s1", "--manifest", "manifest.json", "--config", "config.json",
                     "--checkpoint", "zero.kpw", "--channels", "0", "--out", "d")
    assert code == 0
    assert not np.loadtxt(train_workdir / "d" / "s1.desc0.txt").any()


def test_export_channel_out_of_range(train_workdir, capsys):
    run(capsys, "train", "--manifest", "manifest.json", "--config", "config.json", "--steps", "0", "--out", "t")
    code, _, err = run(capsys, "export-desc", "s0", "--manifest", "manifest.json", "--config", "config.json",
                       "--checkpoint", "t/checkpoint.kpw", "--channels", "5")
    assert code == 2 and "out of range" in err
