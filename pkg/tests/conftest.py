import torch

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance-gate verdict lines after the test summary."""
    try:
        from test_acceptance import RESULTS
    except Exception:
        return
    if RESULTS:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance gate:")
        for line in RESULTS:
            terminalreporter.write_line(line)
