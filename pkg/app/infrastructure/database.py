"""Async engine and sessions for the run ledger.

The orchestrator opens a short session per ledger operation: one to look up a
completed run by ``input_hash``, one to insert the ``running`` row, and one to
store the final report or error. The CLI disposes the engine when a suite ends,
since pooled aiosqlite connections are bound to the event loop that opened them.
"""

from sqlalchemy.ext.asyncio import AsyncSession, create_async_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from app.infrastructure.config import settings

_IS_SQLITE = settings.DATABASE_URL.startswith("sqlite")

engine = create_async_engine(
    settings.DATABASE_URL,
    connect_args={"check_same_thread": False} if _IS_SQLITE else {},
    echo=False,
)

AsyncSessionLocal = sessionmaker(engine, class_=AsyncSession, expire_on_commit=False)

Base = declarative_base()


async def init_db() -> None:
    """Create the ledger tables if they are missing."""
    import app.features.experiments.models  # noqa: F401

    async with engine.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)
