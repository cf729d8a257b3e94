"""Hamilton Driver wrapper for ablation sweeps."""

from types import ModuleType
from typing import Any, Dict, List, Optional
from hamilton import driver, telemetry
from hamilton.execution import executors

from hdp_lab.settings import get_settings
from hdp_lab.synthdata import ProtocolSpec
from hdp_lab.trainer import TrainConfig


class SweepDriver:
    """Hamilton Driver wrapper running one experiment per grid point.

    The sweep DAG fans out over grid points (Parallelizable), runs each point into
    its own subdirectory, and collects the per-point rows into a summary
    DataFrame (Collect). Points run sequentially unless a multiprocessing remote
    executor is requested.
    """

    def __init__(
            self,
            *,
            local_executor_type: Optional[str] = 'synchronous',
            remote_executor_type: str = 'synchronous',
            max_parallel_tasks: Optional[int] = None,
            enable_telemetry: bool = False
    ):
        """Initialize SweepDriver.

        Args:
            local_executor_type: Local executor type. Only 'synchronous' is supported.
            remote_executor_type: Executor of the per-point tasks: 'synchronous'
                (default) or 'multiprocessing'.
            max_parallel_tasks: Worker processes for 'multiprocessing'. If None, uses
                SWEEP_MAX_PARALLEL_TASKS from settings.
            enable_telemetry: Enable Hamilton telemetry data collection.
                Defaults to False.
        """
        settings = get_settings()

        self.drivers: Dict[str, driver.Driver] = {}

        self._local_executor_type = local_executor_type
        self._remote_executor_type = remote_executor_type
        self._max_parallel_tasks = max_parallel_tasks or settings.sweep_max_parallel_tasks

        if not enable_telemetry:
            telemetry.disable_telemetry()

    def run_sweep(
            self,
            protocol_spec: ProtocolSpec,
            base_train_config: TrainConfig,
            sweep_grid: Dict[str, List[str]],
            sweep_out_dir: str,
            summary_csv: str = 'enabled',
    ) -> Dict[str, Any]:
        """Run every point of a grid and summarize the results.

        Args:
            protocol_spec: Protocol shared by all points.
            base_train_config: Configuration the grid values override.
            sweep_grid: Ordered mapping of sweep key to values, see
                hdp_lab.analysis.sweep.SWEEP_KEYS.
            sweep_out_dir: Directory receiving one subdirectory per point and summary.csv.
            summary_csv: 'enabled' to write summary.csv, 'disabled' to skip it.

        Returns:
            Dictionary with 'sweep_summary' (DataFrame, one row per point) and
            'sweep_summary_csv' (storage status of summary.csv, empty when disabled).

        Raises:
            ValueError: If the grid is empty or a point fails validation.
        """
        from hdp_lab.analysis.dag import grid, run, summary

        if summary_csv not in ['enabled', 'disabled']:
            raise ValueError(f"Unsupported summary_csv: {summary_csv}")

        driver_name = f"sweep_{summary_csv}"
        if driver_name not in self.drivers:
            self.drivers[driver_name] = self._build_default_driver(
                modules=[grid, run, summary],
                config={'summary_csv': summary_csv},
            )

        return self.drivers[driver_name].execute(
            final_vars=['sweep_summary', 'sweep_summary_csv'],
            inputs={
                'sweep_grid': sweep_grid,
                'base_train_config': base_train_config.model_dump(mode='json'),
                'protocol_spec': protocol_spec.model_dump(mode='json'),
                'sweep_out_dir': str(sweep_out_dir),
            }
        )

    def _build_default_driver(
            self,
            modules: List[ModuleType],
            config: Dict[str, Any] = None,
    ) -> driver.Driver:
        """Build a Hamilton Driver with dynamic execution and the configured executors.

        Raises:
            ValueError: If an unknown executor type is configured.
        """
        if self._local_executor_type == 'synchronous':
            local_executor = executors.SynchronousLocalTaskExecutor()
        else:
            raise ValueError(
                f"Unknown local executor type: {self._local_executor_type}. "
                f"Expected 'synchronous'."
            )

        if self._remote_executor_type == 'synchronous':
            remote_executor = executors.SynchronousLocalTaskExecutor()
        elif self._remote_executor_type == 'multiprocessing':
            remote_executor = executors.MultiProcessingExecutor(max_tasks=self._max_parallel_tasks)
        else:
            raise ValueError(
                f"Unknown executor type: {self._remote_executor_type}. "
                f"Expected 'synchronous' or 'multiprocessing'."
            )

        builder = driver.Builder().with_modules(*modules)

        if config:
            builder = builder.with_config(config)

        return (
            builder
            .enable_dynamic_execution(allow_experimental_mode=True)
            .with_local_executor(local_executor)
            .with_remote_executor(remote_executor)
            .build()
        )
