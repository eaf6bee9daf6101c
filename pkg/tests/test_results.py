import json

from infkit.metrics import MetricsReport
from infkit.results import dumps, read_json, rows_to_csv, write_json, write_trace_csvs


def test_json_is_sorted_and_round_trips(tmp_path):
    import numpy as np
    doc = {"b": np.float64(1.5), "a": np.arange(3)}
    text = dumps(doc)
    assert text.index('"a"') < text.index('"b"')
    write_json(tmp_path / "x.json", doc)
    assert read_json(tmp_path / "x.json") == {"a": [0, 1, 2], "b": 1.5}
    assert not list(tmp_path.glob("*.tmp"))


def test_csv_rendering():
    assert rows_to_csv(("a", "b"), [(1, None), (0.1, "x")]) == "a,b\n1,\n0.1,x\n"


def test_trace_csvs(tmp_path):
    trace = [MetricsReport(test_acc=90.0, self_acc=100.0, histogram=[2, 0], step=0),
             MetricsReport(test_acc=89.0, self_acc=0.0, histogram=[0, 2], step=1).to_dict()]
    paths = write_trace_csvs(tmp_path, "run", trace)
    assert [p.name for p in paths] == ["run_trace.csv", "run_histogram.csv"]
    lines = paths[0].read_text().splitlines()
    assert lines[0] == "step,test_loss,test_acc,self_loss,self_acc,f1"
    assert lines[2] == "1,,89.0,,0.0,"
    assert paths[1].read_text().splitlines()[1:] == ["0,0,2", "0,1,0", "1,0,0", "1,1,2"]
    json.dumps(trace[1])
