"""
Markdown output adapter
"""
from typing import Dict, Any, List, Optional

import yaml

from .base_adapter import OutputAdapter

ROW_COLUMNS = [
    ("label", "Configuration"),
    ("f_score", "F-score"),
    ("tp", "TP"),
    ("fp", "FP"),
    ("fn", "FN"),
    ("total_loss_wh", "Energy loss (Wh)"),
    ("loss_per_day_wh", "Loss/day (Wh)"),
    ("ambr", "AMBR"),
    ("ambr_per_day", "AMBR/day"),
    ("clip_rate", "Clip rate"),
]


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class MarkdownAdapter(OutputAdapter):
    """Markdown report with YAML frontmatter and a results table"""

    def __init__(self, config: Dict[str, Any]):
        super().__init__(config)
        self.include_echo = config.get('include_config_echo', True)

    @property
    def extension(self) -> str:
        return "md"

    async def export_report(self, report_data: Dict, metadata: Dict) -> str:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / f"{self.filename}.{self.extension}"

        frontmatter = {
            'title': "Battery privacy evaluation",
            'days': report_data.get('days'),
            'horizon': report_data.get('horizon'),
            'mode': report_data.get('mode'),
            'tags': ["quiet-meter", "evaluation"],
        }
        content = f"---\n{yaml.dump(frontmatter, default_flow_style=False, sort_keys=False)}---\n\n"
        content += "# Battery privacy evaluation\n\n"
        content += self._results_table(report_data.get('rows', []))
        content += self._soc_files(report_data.get('rows', []))

        if self.include_echo:
            content += "\n## Configuration echo\n\n```yaml\n"
            content += yaml.safe_dump(metadata, sort_keys=False, default_flow_style=None)
            content += "```\n"

        path.write_text(content, encoding='utf-8')
        return str(path)

    def _results_table(self, rows: List[Dict]) -> str:
        header = "| " + " | ".join(title for _, title in ROW_COLUMNS) + " |\n"
        rule = "|" + "|".join("---" for _ in ROW_COLUMNS) + "|\n"
        body = "".join(
            "| " + " | ".join(_cell(row.get(key)) for key, _ in ROW_COLUMNS) + " |\n"
            for row in rows
        )
        return header + rule + body

    def _soc_files(self, rows: List[Dict]) -> str:
        files: List[Optional[str]] = [row.get('soc_file') for row in rows if row.get('soc_file')]
        if not files:
            return ""
        return "\n## SOC trajectories\n\n" + "".join(f"- `{name}`\n" for name in files)
