"""Session authentication: salted password hashing, bearer tokens, expiry."""

from __future__ import annotations

import hashlib
import hmac
import secrets
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Optional

SESSION_LIFETIME = timedelta(hours=24)

PBKDF2_ITERATIONS = 60_000


def hash_password(password: str, salt: Optional[str] = None,
                  iterations: int = PBKDF2_ITERATIONS) -> str:
    """PBKDF2-SHA256, encoded as pbkdf2_sha256$<iterations>$<salt>$<hex>."""
    if salt is None:
        salt = secrets.token_hex(8)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"),
                                 salt.encode("utf-8"), iterations)
    return f"pbkdf2_sha256${iterations}${salt}${digest.hex()}"


def verify_password(password: str, stored: str) -> bool:
    """Constant-time comparison against a stored hash."""
    try:
        scheme, iterations, salt, _ = stored.split("$")
        if scheme != "pbkdf2_sha256":
            return False
        recomputed = hash_password(password, salt=salt, iterations=int(iterations))
    except (ValueError, TypeError):
        return False
    return hmac.compare_digest(recomputed.encode(), stored.encode())


@dataclass(frozen=True)
class Session:
    token: str
    user_id: str
    expires_at: datetime


class UserStore:
    """Usernames to password hashes; usernames double as user ids."""

    def __init__(self):
        self._users = {}

    def add(self, username: str, password_hash: str) -> None:
        self._users[username] = password_hash

    def check(self, username: str, password: str) -> bool:
        stored = self._users.get(username)
        if stored is None:
            # Burn comparable time so missing users are not distinguishable.
            verify_password(password, hash_password("x"))
            return False
        return verify_password(password, stored)

    def __contains__(self, username: str) -> bool:
        return username in self._users


class SessionManager:
    def __init__(self, lifetime: timedelta = SESSION_LIFETIME, clock=None):
        self._lock = threading.Lock()
        self._sessions = {}
        self._lifetime = lifetime
        self._clock = clock or (lambda: datetime.now(timezone.utc))

    def create(self, user_id: str) -> Session:
        token = secrets.token_hex(16)
        session = Session(token=token, user_id=user_id,
                          expires_at=self._clock() + self._lifetime)
        with self._lock:
            self._sessions[token] = session
        return session

    def resolve(self, token: Optional[str]) -> Optional[Session]:
        """The session for a live token, or None."""
        if not token:
            return None
        with self._lock:
            session = self._sessions.get(token)
        if session is None or session.expires_at <= self._clock():
            return None
        return session

    def revoke(self, token: str) -> None:
        with self._lock:
            self._sessions.pop(token, None)


def bearer_token(headers: dict) -> Optional[str]:
    """Extract the token from an Authorization: Bearer header (case-insensitive)."""
    for key, value in headers.items():
        if key.lower() == "authorization":
            if isinstance(value, str) and value.startswith("Bearer "):
                return value[len("Bearer "):].strip()
            return None
    return None
