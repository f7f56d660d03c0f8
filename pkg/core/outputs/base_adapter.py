"""
Base class for report output adapters
"""
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Any


class OutputAdapter(ABC):
    """Base class for all output adapters"""

    filename = "report"

    def __init__(self, config: Dict[str, Any]):
        """
        Initialize adapter with configuration

        Args:
            config: Configuration dictionary; output_directory sets the target
        """
        self.config = config
        self.format_name = self.__class__.__name__.replace('Adapter', '').lower()
        self.output_dir = Path(config.get('output_directory', './results'))

    @abstractmethod
    async def export_report(self, report_data: Dict, metadata: Dict) -> str:
        """
        Export an experiment report

        Args:
            report_data: Report rows and headline values, including:
                - rows: One entry per initial SOC plus the baseline row
                - horizon: Slots per day
                - days: Validation days
            metadata: Config echo including:
                - cardinalities: Lattice sizes
                - household: Resolved model matrices
                - attacker: Threshold and slot tolerance
                - seeds: Seeds the run used

        Returns:
            Path of the written file

        Raises:
            OSError: If the file cannot be written
        """
        pass

    def get_output_location(self) -> str:
        return str(self.output_dir / f"{self.filename}.{self.extension}")

    @property
    @abstractmethod
    def extension(self) -> str:
        pass

    def validate_config(self) -> bool:
        """
        Validate adapter configuration

        Raises:
            ValueError: If configuration is invalid
        """
        if not str(self.config.get('output_directory', './results')).strip():
            raise ValueError(f"{self.format_name} adapter needs an output_directory")
        return True
