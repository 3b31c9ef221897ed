from feddah.config import from_mapping


def tiny_config(**over):
    """Small but complete setup: 3 clients, 2 shared-initial, 2 shared, 1 unique each."""
    base = dict(seed=0, unique_tasks=[["u1"], ["u2"], ["u3"]], shared_initial=["i1", "i2"],
                shared=["s1", "s2"], E=1, T=2, n_z=2, d=3, hidden=[4],
                samples_per_task=10, n_server=3, output_dir="unused")
    base.update(over)
    return from_mapping(base)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}")
