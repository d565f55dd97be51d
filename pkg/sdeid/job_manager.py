from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from tqdm import tqdm

T = TypeVar("T")
R = TypeVar("R")


class JobManager:
    def __init__(self, *, max_workers: int):
        self._max_workers = max(1, int(max_workers))
        self._executor = ThreadPoolExecutor(max_workers=self._max_workers, thread_name_prefix="sdeid")
        self._state_lock = threading.Lock()
        self._state: dict[str, dict] = {}

    @property
    def max_workers(self) -> int:
        return self._max_workers

    def set_state(self, stage: str, **updates) -> None:
        with self._state_lock:
            state = self._state.get(stage) or {}
            state.update(updates)
            self._state[stage] = state

    def get_state(self, stage: str) -> dict:
        with self._state_lock:
            return dict(self._state.get(stage) or {})

    def states(self) -> dict[str, dict]:
        with self._state_lock:
            return {stage: dict(state) for stage, state in self._state.items()}

    def reset(self) -> None:
        with self._state_lock:
            self._state.clear()

    def map(
        self,
        fn: Callable[[T], R],
        items: Iterable[T],
        stage: str,
        *,
        show_progress: bool = False,
    ) -> list[R]:
        """Run fn over items on the pool; results come back in submission order."""
        items = list(items)
        total = len(items)
        self.set_state(stage, status="running", progress=0, total=total)
        if total == 0:
            self.set_state(stage, status="done")
            return []

        futures = [self._executor.submit(fn, item) for item in items]
        results: list[R] = []
        try:
            for idx, future in enumerate(tqdm(futures, total=total, desc=stage, disable=not show_progress)):
                results.append(future.result())
                self.set_state(stage, progress=idx + 1)
        except Exception as exc:
            for future in futures:
                future.cancel()
            self.set_state(stage, status="error", error=str(exc))
            raise
        self.set_state(stage, status="done")
        return results

    def shutdown(self) -> None:
        self._executor.shutdown(wait=True, cancel_futures=True)
