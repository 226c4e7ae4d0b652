import shutil

import numpy as np
import pytest

from detcon import dtns
from detcon.cli import main
from detcon.train.scenes import SceneSpec, gen_scenes


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    return gen_scenes(SceneSpec(n_images=8, size=32, seed=2), tmp_path_factory.mktemp("cli") / "ds", ppm=True)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_cfg(path, dataset, **kw):
    base = dict(dataset=dataset, out=path.parent / "run", batch_size=4, epochs=1, latents=2, resolution=32,
                fh_scale=100.0, fh_min_size=20)
    base.update(kw)
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()))
    return path


def test_flops_paper_dims(capsys):
    code, out, _ = run(capsys, "flops", "--variant", "s", "--latents", 16, "--paper-dims")
    header, row = out.strip().split("\n")
    values = dict(zip(header.split("\t"), row.split("\t")))
    assert code == 0 and values["head_flops"] == "4456448" and 66e6 <= int(values["head_overhead"]) <= 68e6


def test_usage_errors_exit_2(capsys):
    assert run(capsys, "nope")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "flops", "--variant", "x")[0] == 2
    assert run(capsys, "flops", "--variant", "s", "--latents", 0)[0] == 2
    assert run(capsys, "grad-check", "--ops", "matmul,frobnicate")[0] == 2
    assert run(capsys, "gen-scenes", "--out", "x", "--objects", "3,1")[0] == 2


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    out = capsys.readouterr().out
    assert exc.value.code == 0
    for name in ("segment", "abo", "augment", "flops", "grad-check", "pretrain", "eval", "report"):
        assert name in out


def test_grad_check_selected_ops(capsys):
    code, out, _ = run(capsys, "grad-check", "--ops", "matmul,relu,softmax-cross-entropy-with-logits", "--skip-end-to-end")
    lines = dict(line.split("\t", 1) for line in out.strip().split("\n"))
    assert code == 0 and set(lines) == {"matmul", "relu", "softmax-cross-entropy-with-logits", "max"}
    assert lines["max"].endswith("PASS")


def test_seeded_outputs_are_byte_identical(capsys, tmp_path, scenes):
    img = scenes / "images" / "00000.ppm"
    for tag in ("a", "b"):
        assert run(capsys, "augment", "--image", img, "--size", 32, "--preview", tmp_path / f"{tag}.ppm",
                   "--seed", 5)[0] == 0
        assert run(capsys, "gen-scenes", "--out", tmp_path / f"s{tag}", "--n", 2, "--size", 16, "--seed", 5)[0] == 0
        assert run(capsys, "segment", "--image", img, "--scale", 50, "--min-size", 10,
                   "--out", tmp_path / f"{tag}.dtns", "--seed", 5)[0] == 0
    for one, two in [("a.ppm", "b.ppm"), ("a.dtns", "b.dtns"), ("sa/images/00001.dtns", "sb/images/00001.dtns"),
                     ("sa/meta.tsv", "sb/meta.tsv")]:
        assert (tmp_path / one).read_bytes() == (tmp_path / two).read_bytes()


def test_segment_store_respects_env(capsys, tmp_path, scenes, monkeypatch):
    monkeypatch.setenv("DETCON_CACHE", str(tmp_path / "cache"))
    code, out, _ = run(capsys, "segment", "--image", scenes / "images" / "00001.dtns", "--method", "grid",
                       "--grid-n", 2, "--store", tmp_path / "ignored")
    assert code == 0 and out == "regions\t4\n"
    assert (tmp_path / "cache" / "index.tsv").exists() and not (tmp_path / "ignored").exists()


def test_abo_identical_masks(capsys, tmp_path, scenes):
    gt = scenes / "labels" / "00003.dtns"
    code, out, _ = run(capsys, "abo", "--gt", gt, "--pred", gt)
    assert code == 0 and out == "abo\t1.0\n"
    code, out, _ = run(capsys, "abo", "--dataset", scenes, "--method", "grid", "--grid-n", 1)
    assert code == 0 and out.startswith("abo\t")


def test_pretrain_eval_report(capsys, tmp_path, scenes):
    cfg = write_cfg(tmp_path / "run.cfg", scenes)
    code, out, _ = run(capsys, "pretrain", "--config", cfg)
    assert code == 0 and out.startswith("complete\tstep\t2")
    code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "run", "--dataset", scenes)
    assert code == 0 and out.startswith("accuracy\t")
    assert (tmp_path / "run" / "eval.tsv").read_text().startswith("accuracy\t")
    grid_cfg = write_cfg(tmp_path / "grid.cfg", scenes, out=tmp_path / "grid", mask_source="grid", grid_n=2)
    assert run(capsys, "pretrain", "--config", grid_cfg)[0] == 0
    code, out, _ = run(capsys, "report", tmp_path / "run", tmp_path / "grid")
    lines = out.strip().split("\n")
    assert code == 0 and len(lines) == 3 and lines[0].split("\t")[-1] == "accuracy"
    abos = [float(line.split("\t")[7]) for line in lines[1:]]
    assert abos == sorted(abos)
    code, out, _ = run(capsys, "report", "--curves", tmp_path / "run")
    assert code == 0 and len(out.strip().split("\n")) == 3


def test_report_errors(capsys, tmp_path, scenes):
    assert run(capsys, "report")[0] == 2
    cfg = write_cfg(tmp_path / "run.cfg", scenes)
    assert run(capsys, "pretrain", "--config", cfg)[0] == 0
    copy = tmp_path / "copy" / "run"
    copy.parent.mkdir()
    shutil.copytree(tmp_path / "run", copy)
    code, _, err = run(capsys, "report", tmp_path / "run", copy)
    assert code == 2 and "duplicate run ids: run" in err
    code, _, err = run(capsys, "report", tmp_path / "nothing")
    assert code == 2 and "summary.tsv" in err


def test_pretrain_config_errors_exit_2(capsys, tmp_path, scenes):
    bad = tmp_path / "bad.cfg"
    bad.write_text(f"dataset = {scenes}\nlearning_rate = 3\n")
    code, _, err = run(capsys, "pretrain", "--config", bad)
    assert code == 2 and "unknown key 'learning_rate'" in err
    assert run(capsys, "pretrain", "--config", tmp_path / "missing.cfg")[0] == 2
    cfg = write_cfg(tmp_path / "tau.cfg", scenes, tau=0)
    assert run(capsys, "pretrain", "--config", cfg)[0] == 2


def test_pretrain_divergence_exits_3(capsys, tmp_path, scenes):
    cfg = write_cfg(tmp_path / "div.cfg", scenes, base_lr=1e38, epochs=3)
    code, _, err = run(capsys, "pretrain", "--config", cfg)
    assert code == 3 and "last good checkpoint" in err
    assert (tmp_path / "run" / "checkpoint" / "state.txt").exists()


def test_stop_and_resume(capsys, tmp_path, scenes):
    cfg = write_cfg(tmp_path / "run.cfg", scenes, epochs=2)
    code, out, _ = run(capsys, "pretrain", "--config", cfg, "--stop-after", 1)
    assert code == 0 and out.startswith("stopped\tstep\t1")
    code, out, _ = run(capsys, "pretrain", "--config", cfg)
    assert code == 0 and out.startswith("complete\tstep\t4")
    resumed = (tmp_path / "run" / "metrics.tsv").read_bytes()
    code, _, _ = run(capsys, "pretrain", "--config", cfg, "--no-resume", "--out", tmp_path / "fresh")
    assert code == 0 and (tmp_path / "fresh" / "metrics.tsv").read_bytes() == resumed


def test_augment_masks_follow_image(capsys, tmp_path, scenes):
    code, _, _ = run(capsys, "augment", "--image", scenes / "images" / "00002.dtns", "--size", 32,
                     "--preview", tmp_path / "v.ppm", "--masks", scenes / "labels" / "00002.dtns", "--seed", 3)
    assert code == 0
    masks = dtns.load(tmp_path / "v.masks.dtns")
    assert masks.shape[1:] == (32, 32) and set(np.unique(masks)) <= {0, 1}
