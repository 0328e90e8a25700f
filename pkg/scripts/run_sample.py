import asyncio
import sys
from pathlib import Path

from app.features.experiments.service import run_all
from app.infrastructure.logging import configure_logging

SMOKE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "smoke.json"


async def main():
    print(f"Running {SMOKE_CONFIG.name}...")
    outcome = await run_all(SMOKE_CONFIG, out_dir="results/smoke", use_cache=False)

    print("\n--- Summary ---")
    for row in outcome.summary:
        status = "PASS" if row.verdict else "FAIL"
        slope = f"slope {row.slope:.3f}" if row.slope is not None else "no slope"
        print(f"{status}  {row.experiment_id:20s} {row.kind:18s} {slope}  {row.detail}")
    print(f"\nOutputs in {outcome.out_dir}")
    return outcome.exit_code


if __name__ == "__main__":
    configure_logging("INFO")
    sys.exit(asyncio.run(main()))
