import logging
import time
from collections import defaultdict
from datetime import datetime
from typing import Any, Dict, List

import psutil

logger = logging.getLogger(__name__)


class PerformanceMonitor:
    """Wall-clock and resident-memory accounting for training phases"""

    def __init__(self):
        self.metrics = {
            "phase_times": [],
            "phase_success": defaultdict(list),
            "system_resources": [],
        }
        self.start_time = time.time()
        self.process = psutil.Process()

    def start_operation(self, operation_name: str) -> Dict[str, Any]:
        """Start timing a phase"""
        return {
            "operation": operation_name,
            "start_time": time.time(),
            "start_memory": self.process.memory_info().rss,
        }

    def end_operation(self, operation_data: Dict[str, Any], success: bool = True) -> float:
        """Stop timing a phase and record its duration and memory delta"""
        duration = time.time() - operation_data["start_time"]
        memory_delta = self.process.memory_info().rss - operation_data["start_memory"]

        self.metrics["phase_times"].append({
            "operation": operation_data["operation"],
            "duration": duration,
            "timestamp": datetime.now().isoformat(),
            "success": success,
            "memory_delta": memory_delta,
        })
        self.metrics["phase_success"][operation_data["operation"]].append(success)
        logger.info(f"{operation_data['operation']} finished in {duration:.1f}s (rss {memory_delta / 2**20:+.1f} MiB)")
        return duration

    def record_system_metrics(self):
        """Record current CPU and memory usage"""
        memory = psutil.virtual_memory()
        self.metrics["system_resources"].append({
            "timestamp": datetime.now().isoformat(),
            "cpu_percent": psutil.cpu_percent(),
            "memory_percent": memory.percent,
            "rss": self.process.memory_info().rss,
        })
        if len(self.metrics["system_resources"]) > 50:
            self.metrics["system_resources"] = self.metrics["system_resources"][-50:]

    def get_performance_summary(self) -> Dict[str, Any]:
        """Summary dict written into run manifests and reports"""
        phases: Dict[str, Dict[str, Any]] = {}
        for record in self.metrics["phase_times"]:
            entry = phases.setdefault(record["operation"], {"runs": 0, "total_seconds": 0.0, "failures": 0})
            entry["runs"] += 1
            entry["total_seconds"] += record["duration"]
            entry["failures"] += 0 if record["success"] else 1

        return {
            "uptime_seconds": time.time() - self.start_time,
            "peak_rss_mib": max([r["rss"] for r in self.metrics["system_resources"]] + [self.process.memory_info().rss]) / 2**20,
            "phases": phases,
        }

    def get_slow_operations(self, threshold: float = 60.0) -> List[Dict[str, Any]]:
        """Phases that took longer than threshold seconds, slowest first"""
        slow_ops = [
            {"operation": m["operation"], "duration": m["duration"], "timestamp": m["timestamp"]}
            for m in self.metrics["phase_times"]
            if m["duration"] > threshold
        ]
        return sorted(slow_ops, key=lambda x: x["duration"], reverse=True)
