from typing import List, Dict, Any
from abc import ABC, abstractmethod


class MeterAgent(ABC):
    """Base class for actors that act on or observe a metered household"""

    def __init__(self, agent_id: str, role: str):
        self.agent_id = agent_id
        self.role = role
        self.memory: List[Dict[str, Any]] = []

    @abstractmethod
    def describe(self) -> Dict[str, Any]:
        """Return the settings this agent runs with"""
        pass

    def remember(self, task: str, result: Dict[str, Any]) -> Dict[str, Any]:
        """
        Record one completed task in the agent's run memory

        Entries carry no wall-clock time so that repeated runs stay identical.

        Args:
            task: Short task name, e.g. "run" or "attack"
            result: Summary values of the task

        Returns:
            The stored entry
        """
        entry = {
            "agent_id": self.agent_id,
            "role": self.role,
            "task": task,
            "sequence": len(self.memory),
            "result": result,
        }
        self.memory.append(entry)
        return entry

    def recall(self, task: str) -> List[Dict[str, Any]]:
        """Entries of one task type, oldest first"""
        return [entry for entry in self.memory if entry["task"] == task]
