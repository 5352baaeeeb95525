"""Smoke test for the intact_py extension.

Build and install it first, e.g.

    pip install maturin
    maturin develop -m crates/py/Cargo.toml --features extension-module

then run `python python/smoke_test.py`.
"""

import math
import tempfile

import intact_py as it


def check_lidar():
    b = it.lidar_budget(100.0)
    assert math.isclose(b["p_laser"], 0.4, rel_tol=1e-9)
    assert math.isclose(b["p_scan"], 7.5, rel_tol=1e-9)
    assert math.isclose(b["delta_r"], 299792458.0 * 5e-9 / 2, rel_tol=1e-12)
    far = it.lidar_budget(200.0)
    assert math.isclose(far["e_pulse_required"] / b["e_pulse_required"], 16.0, rel_tol=1e-12)
    spec = it.lidar_severity(200.0, 100.0)
    assert 0.0 <= spec.drop_fraction <= 0.5
    print("lidar ok", round(b["p_total"], 4), "W")


def check_data():
    ds = it.make_dataset(per_class=6, n_points=64, seed=3)
    train = ds.split("train")
    assert ds.num_classes == 6 and len(train) > 0
    cloud = train[0]
    assert len(cloud) == 64
    dropped = it.perturb_uniform(cloud, it.PerturbationSpec(drop_fraction=0.5), seed=1)
    assert len(dropped) == 32
    again = it.perturb_uniform(cloud, it.PerturbationSpec(drop_fraction=0.5), seed=1)
    assert dropped.points == again.points
    scores = [p[0] * p[0] for p in cloud.points]
    targeted = it.drop_points(cloud, it.PerturbationSpec(drop_fraction=0.25, targeted=True), scores, seed=0)
    assert len(targeted) == 48
    print("data ok", cloud)


def check_pipeline():
    with tempfile.TemporaryDirectory() as out:
        cfg = it.Config(
            overrides=[
                f'paths.out="{out}"',
                "dataset.per_class=6",
                "dataset.n_points=32",
                "teacher.meta_iterations=2",
                "teacher.k_support=2",
                "teacher.k_query=2",
                "student.stages=2",
                "student.epochs_per_stage=1",
                "eval.trials=1",
            ]
        )
        cfg.gen_data()
        teacher = cfg.train_teacher()
        assert cfg.train_students() == ["baseline", "act", "intact"]
        assert it.Teacher.load(str(cfg.teacher_path())).hash() == teacher.hash()
        table = cfg.evaluate()
        assert set(table) == {"clean", "noise_0.1", "drop_0.5"}
        assert set(table["clean"]) == {"baseline", "act", "intact", "teacher"}
        student = it.Student.load(str(cfg.student_path("intact")))
        cloud = it.Dataset.load(f"{out}/dataset").split("test")[0]
        assert 0 <= student.predict(cloud) < 6
        assert len(teacher.saliency(cloud)) == len(cloud)
        print("pipeline ok", cfg.hash()[:12])


if __name__ == "__main__":
    check_lidar()
    check_data()
    check_pipeline()
    print("smoke test passed")
