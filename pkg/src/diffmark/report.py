"""Consolidated reporting over completed run directories.

Reads the config.json / metrics.jsonl / curve.json artifacts the runner
leaves behind and renders cross-run tables (markdown and CSV) plus a curve
overlay plot.  A run directory missing optional artifacts is flagged
incomplete rather than crashing the report; a directory missing the
mandatory ones is an error.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path


def read_run(run_dir: str | Path) -> dict:
    """Parse one run directory into config, metric rows, summary, and curve."""
    run = Path(run_dir)
    if not run.is_dir():
        raise ValueError(f"run dir {run} does not exist")
    config_path = run / "config.json"
    metrics_path = run / "metrics.jsonl"
    if not config_path.exists() or not metrics_path.exists():
        raise ValueError(f"malformed run dir {run}: needs config.json and metrics.jsonl")
    try:
        config = json.loads(config_path.read_text())
        rows = [
            json.loads(line)
            for line in metrics_path.read_text().splitlines()
            if line.strip()
        ]
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed run dir {run}: {e}") from e
    summary = next((r for r in reversed(rows) if "stage" in r), {})
    curve = None
    if (run / "curve.json").exists():
        curve = json.loads((run / "curve.json").read_text())
    return {
        "dir": str(run),
        "name": run.name,
        "config": config,
        "rows": rows,
        "summary": summary,
        "curve": curve,
    }


def _is_incomplete(run: dict) -> bool:
    # attack runs must leave a retention curve behind
    return run["summary"].get("stage") == "attack" and run["curve"] is None


def _summary_table(runs: list[dict]) -> tuple[list[str], list[list]]:
    keys: list[str] = []
    for run in runs:
        for k in run["summary"]:
            if k != "stage" and k not in keys:
                keys.append(k)
    header = ["run", "stage", "status"] + keys
    body = []
    for run in runs:
        status = "incomplete" if _is_incomplete(run) else "complete"
        row = [run["name"], run["summary"].get("stage", ""), status]
        row += [run["summary"].get(k, "") for k in keys]
        body.append(row)
    return header, body


def _adapter_grid(runs: list[dict]) -> tuple[list[int], dict[int, dict[int, float]]]:
    """rank -> step -> triggered bit accuracy, over adapter attack runs."""
    grid: dict[int, dict[int, float]] = {}
    steps: set[int] = set()
    for run in runs:
        if run["summary"].get("kind") != "low_rank_adapter" or run["curve"] is None:
            continue
        rank = run["config"]["attack"]["lora"]["rank"]
        grid[rank] = {r["step"]: r["bit_accuracy"] for r in run["curve"]}
        steps.update(grid[rank])
    return sorted(steps), dict(sorted(grid.items()))


def _write_csv(path: Path, header: list[str], body: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(body)


def _markdown_table(header: list[str], body: list[list]) -> str:
    lines = [
        "| " + " | ".join(str(h) for h in header) + " |",
        "| " + " | ".join("---" for _ in header) + " |",
    ]
    for row in body:
        lines.append("| " + " | ".join(str(v) for v in row) + " |")
    return "\n".join(lines)


def _plot_curves(runs: list[dict], path: Path) -> bool:
    curved = [r for r in runs if r["curve"]]
    if not curved:
        return False
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for run in curved:
        rows = sorted(run["curve"], key=lambda r: r["step"])
        key = "bit_accuracy" if "bit_accuracy" in rows[0] else "detection_rate"
        ax.plot(
            [r["step"] for r in rows],
            [r[key] for r in rows],
            marker="o",
            label=f"{run['name']} ({key})",
        )
    ax.set_xlabel("attack steps")
    ax.set_ylabel("retention")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def emit_report(run_dirs: list[str | Path], out_dir: str | Path) -> dict:
    """Render summary.csv, report.md, and curves.png into out_dir."""
    if not run_dirs:
        raise ValueError("need at least one run dir")
    runs = [read_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    header, body = _summary_table(runs)
    _write_csv(out / "summary.csv", header, body)

    sections = ["# Run report", "", "## Summary", "", _markdown_table(header, body)]
    steps, grid = _adapter_grid(runs)
    if grid:
        grid_header = ["rank"] + [str(s) for s in steps]
        grid_body = [
            [rank] + [by_step.get(s, "") for s in steps]
            for rank, by_step in grid.items()
        ]
        _write_csv(out / "adapter_grid.csv", grid_header, grid_body)
        sections += [
            "",
            "## Adapter attack: triggered bit accuracy by rank and step",
            "",
            _markdown_table(grid_header, grid_body),
        ]
    if _plot_curves(runs, out / "curves.png"):
        sections += ["", "![retention curves](curves.png)"]
    incomplete = [r["name"] for r in runs if _is_incomplete(r)]
    if incomplete:
        sections += ["", "Incomplete runs: " + ", ".join(incomplete)]
    (out / "report.md").write_text("\n".join(sections) + "\n")
    return {"num_runs": len(runs), "incomplete": len(incomplete)}
