_CRITERIA = {
    "test_trajectory_accuracy_three_maneuvers":
        "trajectory accuracy: three 120-frame maneuvers, noiseless and "
        "0.5 px noise, within 60 s",
    "test_closed_loop_mission":
        "closed loop: 3-subtask mission, each terminus within 0.25 m, "
        "within 120 s",
    "test_optimization_correctness":
        "optimization: jacobians 1e-5, LM non-increasing, pose recovery "
        "to 1e-6",
    "test_alignment_oracle":
        "alignment: Umeyama recovers scale 2 / yaw 90 deg / shift (1,2,3) "
        "under 1e-9",
    "test_statistics_oracles":
        "statistics: ANOVA closure, F/p vs reference, exact t antisymmetry, "
        "df (1,8,8)",
    "test_metric_oracles":
        "metrics: 0.3 offset, summarize triple, 0.0832 rotation wrap",
    "test_cli_determinism":
        "determinism: extract and dataset bit-identical across reruns",
    "test_safety_paths":
        "safety: generation timeout hovers, battery floor lands, static "
        "clip fails to initialize",
}


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, ()):
            if "test_acceptance.py" not in rep.nodeid:
                continue
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            name = rep.nodeid.split("::")[-1]
            rows.append((name, outcome == "passed"))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in sorted(rows):
        word = "PASS" if ok else "FAIL"
        terminalreporter.write_line(
            f"{word}  {_CRITERIA.get(name, name)}")
