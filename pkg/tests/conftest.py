import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(number, passed, detail)``."""

    def record(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_run():
    """The full seeded teacher -> prune -> distill pipeline at the default configuration."""
    import time

    from dualgat.config import PipelineConfig
    from dualgat.gat import init_model
    from dualgat.trainer import (
        distill_student,
        evaluate_model,
        make_suite,
        mean_dsc,
        run_pruning_pass,
        train_teacher,
    )

    cfg = PipelineConfig()
    d, m = cfg.data, cfg.model
    t0 = time.perf_counter()
    suite = make_suite(d.seed, d.n_train, d.n_val, d.side, cfg.tumor_spec(), d.patch_side)
    model = init_model(m.seed, suite.train[0].patches.patches.shape[1], m.embed_dim, m.hidden_dim, m.layers,
                       m.heads, leaky_slope=m.leaky_slope)
    graph_cfg, seg_cfg = cfg.graph_config(), cfg.seg_loss_config()
    initial = evaluate_model(model, suite.train, graph_cfg, seg_cfg)
    teacher, teacher_log = train_teacher(suite, model, cfg.train_config(), graph_cfg, seg_cfg)
    final = evaluate_model(teacher, suite.train, graph_cfg, seg_cfg)
    report, mask = run_pruning_pass(teacher, suite.train, cfg.prune.percent, graph_cfg)
    student, student_log = distill_student(teacher, mask, suite, cfg.distill_train_config(), cfg.distill_config(),
                                           graph_cfg, seg_cfg)
    elapsed = time.perf_counter() - t0
    return {
        "config": cfg,
        "suite": suite,
        "teacher": teacher,
        "student": student,
        "mask": mask,
        "energies": report,
        "teacher_log": teacher_log,
        "student_log": student_log,
        "initial_train_seg": float(sum(r.losses["seg"] for r in initial) / len(initial)),
        "final_train_seg": float(sum(r.losses["seg"] for r in final) / len(final)),
        "teacher_dsc": mean_dsc(evaluate_model(teacher, suite.val, graph_cfg, seg_cfg)),
        "student_dsc": mean_dsc(evaluate_model(student, suite.val, graph_cfg, seg_cfg)),
        "seconds": elapsed,
    }
