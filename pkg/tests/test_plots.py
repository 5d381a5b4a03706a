from deskflow.evaluation import EvalReport
from deskflow.plots import plot_history, plot_raft, plot_reports

PNG = b"\x89PNG\r\n\x1a\n"


def test_history(tmp_path):
    hist = [{"step": s, "loss": 3.0 / s, "lr": 1e-3} for s in range(1, 6)]
    out = plot_history(hist, tmp_path / "sub" / "loss.png")
    assert out.read_bytes().startswith(PNG)


def test_raft(tmp_path):
    metrics = [{"iteration": i, "mean_reward": 0.1 * i, "mean_selected_reward": 0.2 * i} for i in range(3)]
    assert plot_raft(metrics, tmp_path / "raft.png").read_bytes().startswith(PNG)


def test_reports_skip_empty_columns(tmp_path):
    r = EvalReport(None, 12.0, 0.7, 0.6, 0.9, 10, 20, 5.5, 16)
    assert plot_reports({"a": r, "b": r}, tmp_path / "r.png").read_bytes().startswith(PNG)
