"""
YAML output adapter
"""
from typing import Dict

import yaml

from .base_adapter import OutputAdapter


class YamlAdapter(OutputAdapter):
    """Structured report: rows, headline values and the config echo"""

    @property
    def extension(self) -> str:
        return "yaml"

    async def export_report(self, report_data: Dict, metadata: Dict) -> str:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / f"{self.filename}.{self.extension}"
        document = {'report': report_data, 'config_echo': metadata}
        path.write_text(yaml.safe_dump(document, sort_keys=False, default_flow_style=None), encoding='utf-8')
        return str(path)
