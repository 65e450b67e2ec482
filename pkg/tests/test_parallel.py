"""Tests for the process pool and the logging of its workers."""

import json
import os

from mmimo_sim.logging import get_logger, run_log, setup_logging
from mmimo_sim.parallel import parallel_map


def _square(x: int) -> int:
    get_logger("tests.parallel").info("squared", value=x, pid=os.getpid())
    return x * x


def test_parallel_map_keeps_input_order():
    items = [5, 3, 1, 4, 2]
    assert parallel_map(_square, items, workers=2) == [25, 9, 1, 16, 4]
    assert parallel_map(_square, items, workers=1) == [25, 9, 1, 16, 4]
    assert parallel_map(_square, [], workers=3) == []


def test_workers_write_to_the_run_log(tmp_path):
    log_file = tmp_path / "run.log"
    setup_logging(log_file)
    assert run_log() == log_file

    parallel_map(_square, [1, 2, 3, 4], workers=2)

    events = [json.loads(line) for line in log_file.read_text().splitlines()]
    squared = [event for event in events if event["event"] == "squared"]
    assert sorted(event["value"] for event in squared) == [1, 2, 3, 4]
    assert all(event["pid"] != os.getpid() for event in squared)
    assert all(event["level"] == "info" for event in squared)
