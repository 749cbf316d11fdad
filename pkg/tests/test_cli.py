import numpy as np
import pytest

from cxrkit.cli import main
from cxrkit.fileio import load_image
from cxrkit.synthesis import load_manifest_rows


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pool")
    rc = main(["phantom", "--count", "6", "--seed", "7",
               "--abnormal-fraction", "0.5", "--size", "64", "--out", str(out)])
    assert rc == 0
    return out


def run_synth(phantom_dir, out, extra=()):
    ref = phantom_dir / "ph0005.pgm"  # a normal phantom
    return main(["synth", "--direction", "abnormal",
                 "--images", str(phantom_dir),
                 "--annotations", str(phantom_dir / "annotations.csv"),
                 "--reference", str(ref), "--k", "1",
                 "--tol", "1e-5", "--out", str(out), *extra])


class TestPhantom:
    def test_writes_pool(self, phantom_dir):
        assert sorted(p.name for p in phantom_dir.glob("*.pgm")) == \
            [f"ph{i:04d}.pgm" for i in range(6)]
        assert (phantom_dir / "annotations.csv").exists()

    def test_deterministic(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            assert main(["phantom", "--count", "3", "--seed", "5",
                         "--abnormal-fraction", "0.5", "--size", "64",
                         "--out", str(out)]) == 0
        for name in ("ph0000.pgm", "ph0001.pgm", "annotations.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_count_zero_is_usage_error(self, tmp_path, capsys):
        rc = main(["phantom", "--count", "0", "--out", str(tmp_path / "x")])
        assert rc == 1

    def test_unwritable_out_is_io_error(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        rc = main(["phantom", "--count", "1", "--out", str(blocker / "sub")])
        assert rc == 2


class TestSynth:
    def test_abnormal_direction_row_count(self, phantom_dir, tmp_path):
        out = tmp_path / "aug"
        assert run_synth(phantom_dir, out) == 0
        rows = load_manifest_rows(out / "manifest.csv")
        # 3 normals in the pool, k=1, one box per donor
        assert len({r["pairId"] for r in rows}) == 3

    def test_normal_direction_on_all_normal_pool_fails(self, tmp_path):
        pool = tmp_path / "pool"
        assert main(["phantom", "--count", "3", "--seed", "2",
                     "--abnormal-fraction", "0", "--size", "64",
                     "--out", str(pool)]) == 0
        rc = main(["synth", "--direction", "normal", "--images", str(pool),
                   "--annotations", str(pool / "annotations.csv"),
                   "--reference", str(pool / "ph0000.pgm"),
                   "--out", str(tmp_path / "x")])
        assert rc == 3

    def test_paste_and_poisson_agree_outside_boxes(self, phantom_dir, tmp_path):
        paste_dir = tmp_path / "paste"
        poisson_dir = tmp_path / "poisson"
        assert run_synth(phantom_dir, paste_dir, ("--blend", "paste")) == 0
        assert run_synth(phantom_dir, poisson_dir, ("--blend", "poisson")) == 0
        rows = load_manifest_rows(poisson_dir / "manifest.csv")
        by_pair = {}
        for r in rows:
            by_pair.setdefault(r["pairId"], []).append(r)
        for pair_id, prows in by_pair.items():
            a = load_image(paste_dir / f"{pair_id}.pgm")
            b = load_image(poisson_dir / f"{pair_id}.pgm")
            mask = np.ones(a.pixels.shape, dtype=bool)
            for r in prows:
                x, y, w, h = (int(r[k]) for k in ("x", "y", "width", "height"))
                mask[y:y + h, x:x + w] = False
            assert np.array_equal(a.pixels[mask], b.pixels[mask])

    def test_determinism(self, phantom_dir, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run_synth(phantom_dir, a) == 0
        assert run_synth(phantom_dir, b, ("--jobs", "2")) == 0
        assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
        for p in a.glob("*.pgm"):
            assert p.read_bytes() == (b / p.name).read_bytes()

    def test_class_info_narrows_donor_pool(self, phantom_dir, tmp_path, capsys):
        # mark every normal phantom except ph0005 as "not normal"
        cls = tmp_path / "cls.csv"
        lines = ["patientId,class"]
        for i in range(6):
            if i < 3:
                lines.append(f"ph{i:04d},Lung Opacity")
            elif i == 5:
                lines.append(f"ph{i:04d},Normal")
            else:
                lines.append(f"ph{i:04d},No Lung Opacity / Not Normal")
        cls.write_text("\n".join(lines) + "\n", encoding="utf-8")
        out = tmp_path / "norm"
        args = ["synth", "--direction", "normal", "--images", str(phantom_dir),
                "--annotations", str(phantom_dir / "annotations.csv"),
                "--class-info", str(cls),
                "--reference", str(phantom_dir / "ph0005.pgm"),
                "--tol", "1e-5", "--out", str(out)]
        assert main(args) == 0
        rows = load_manifest_rows(out / "manifest.csv")
        assert {r["donorId"] for r in rows} == {"ph0005"}
        # widened pool may pick the excluded images as donors
        out2 = tmp_path / "norm2"
        args2 = [a if a != str(out) else str(out2) for a in args]
        assert main(args2 + ["--include-not-normal"]) == 0
        rows2 = load_manifest_rows(out2 / "manifest.csv")
        assert {r["donorId"] for r in rows2} <= {"ph0003", "ph0004", "ph0005"}
        assert len(rows2) >= len(rows)


class TestEvaluate:
    def write_files(self, tmp_path, pred_line):
        gt = tmp_path / "gt.csv"
        gt.write_text("patientId,x,y,width,height,Target\n"
                      "p1,10,10,20,20,1\np2,,,,,0\n", encoding="utf-8")
        pred = tmp_path / "pred.csv"
        pred.write_text("patientId,PredictionString\n" + pred_line, encoding="utf-8")
        return gt, pred

    def test_perfect_predictions(self, tmp_path, capsys):
        gt, pred = self.write_files(tmp_path, "p1,1.0 10 10 20 20\np2,\n")
        rc = main(["evaluate", "--gt", str(gt), "--pred", str(pred),
                   "--out", str(tmp_path / "report.csv")])
        out = capsys.readouterr().out
        assert rc == 0
        assert "mAP over 8 IoU thresholds" in out
        assert "1.000000" in out
        report = (tmp_path / "report.csv").read_text()
        assert "map,1" in report

    def test_second_setting_flags(self, tmp_path, capsys):
        gt, pred = self.write_files(tmp_path, "p1,1.0 10 10 20 20\np2,\n")
        rc = main(["evaluate", "--gt", str(gt), "--pred", str(pred),
                   "--thresholds", "0.4:0.1:0.6", "--no-fn"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "mAP over 3 IoU thresholds" in out
        assert "FN ignored" in out

    def test_malformed_prediction_exit_4_with_row(self, tmp_path, capsys):
        gt, pred = self.write_files(tmp_path, "p1,0.9 1 2\np2,\n")
        rc = main(["evaluate", "--gt", str(gt), "--pred", str(pred)])
        assert rc == 4
        assert ":2:" in capsys.readouterr().err

    def test_unknown_patient_exit_4(self, tmp_path, capsys):
        gt, pred = self.write_files(tmp_path, "p1,\np2,\npx,\n")
        rc = main(["evaluate", "--gt", str(gt), "--pred", str(pred)])
        assert rc == 4


class TestAlign:
    def test_self_alignment_identity(self, phantom_dir, capsys):
        img = phantom_dir / "ph0000.pgm"
        rc = main(["align", "--image", str(img), "--reference", str(img)])
        out = capsys.readouterr().out
        assert rc == 0
        header, row = out.strip().splitlines()
        assert header.startswith("a11,a12,a21,a22,tx,ty,finalLoss")
        vals = [float(v) for v in row.split(",")[:6]]
        assert np.abs(np.array(vals) - np.array([1, 0, 0, 1, 0, 0])).max() <= 1e-3


class TestBlend:
    def test_blend_writes_image(self, phantom_dir, tmp_path, capsys):
        out = tmp_path / "blend.pgm"
        rc = main(["blend", "--target", str(phantom_dir / "ph0000.pgm"),
                   "--source", str(phantom_dir / "ph0005.pgm"),
                   "--region", "10,12,20,16", "--mode", "poisson",
                   "--out", str(out)])
        assert rc == 0
        img = load_image(out)
        assert img.width == 64

    def test_bad_region_is_usage_error(self, phantom_dir, tmp_path):
        rc = main(["blend", "--target", str(phantom_dir / "ph0000.pgm"),
                   "--source", str(phantom_dir / "ph0005.pgm"),
                   "--region", "10,12,20", "--out", str(tmp_path / "x.pgm")])
        assert rc == 1


class TestAttention:
    def test_identity_counterpart_zero_map(self, phantom_dir, tmp_path, capsys):
        img = phantom_dir / "ph0000.pgm"
        prefix = str(tmp_path / "att_")
        rc = main(["attention", "--image", str(img), "--counterpart", str(img),
                   "--feat-w", "8", "--feat-h", "8", "--out-prefix", prefix])
        assert rc == 0
        amap = load_image(tmp_path / "att_attention.pgm")
        assert amap.pixels.max() == 0.0
        res = load_image(tmp_path / "att_residual.pgm")
        assert res.pixels.max() == 0.0


class TestSchedule:
    def test_two_two_sequence(self, capsys):
        rc = main(["schedule", "--plan", "2:2", "--epochs", "8"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "sequence: D,D,G,G,D,D,G,G" in out

    def test_joint(self, capsys):
        rc = main(["schedule", "--plan", "joint", "--epochs", "3"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "sequence: B,B,B" in out

    def test_bad_plan_usage_error(self, capsys):
        assert main(["schedule", "--plan", "0:3", "--epochs", "4"]) == 1


class TestCliPlumbing:
    @pytest.mark.parametrize("cmd", ["phantom", "synth", "evaluate", "align",
                                     "blend", "attention", "schedule"])
    def test_help_exits_zero(self, cmd, capsys):
        assert main([cmd, "--help"]) == 0

    def test_unknown_flag_exits_one(self, capsys):
        assert main(["schedule", "--plan", "2:2", "--epochs", "4",
                     "--bogus", "1"]) == 1

    def test_unknown_command_exits_one(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_config_file_supplies_defaults(self, phantom_dir, tmp_path, capsys):
        cfg = tmp_path / "cxrkit.cfg"
        cfg.write_text("k = 2\ntol = 1e-5  # coarse\n", encoding="utf-8")
        out = tmp_path / "aug"
        ref = phantom_dir / "ph0005.pgm"
        rc = main(["synth", "--direction", "abnormal",
                   "--images", str(phantom_dir),
                   "--annotations", str(phantom_dir / "annotations.csv"),
                   "--reference", str(ref), "--config", str(cfg),
                   "--out", str(out)])
        assert rc == 0
        rows = load_manifest_rows(out / "manifest.csv")
        pairs_per_input = {}
        for r in rows:
            pairs_per_input.setdefault(r["inputId"], set()).add(r["pairId"])
        assert all(len(v) == 2 for v in pairs_per_input.values())

    def test_flag_overrides_config(self, phantom_dir, tmp_path):
        cfg = tmp_path / "cxrkit.cfg"
        cfg.write_text("k = 2\ntol = 1e-5\n", encoding="utf-8")
        out = tmp_path / "aug"
        rc = run_synth(phantom_dir, out, ("--config", str(cfg), "--k", "1"))
        assert rc == 0
        rows = load_manifest_rows(out / "manifest.csv")
        assert len({r["pairId"] for r in rows}) == 3  # k=1 from the flag

    def test_unknown_config_key_exits_one(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("mystery = 1\n", encoding="utf-8")
        rc = main(["schedule", "--plan", "2:2", "--epochs", "4",
                   "--config", str(cfg)])
        assert rc == 1
