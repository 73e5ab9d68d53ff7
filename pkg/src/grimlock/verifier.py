"""Verifier/issuer endpoint: appraises both guards' evidence and mints tokens."""

from __future__ import annotations

import random
from dataclasses import dataclass

from .attestation import AppraisalPolicy, AppraisalResult, Evidence, NonceCache, appraise
from .core import Digest, Scope, host_of_audience, keypair_from_seed
from .errors import AuthorizationDenied, TokenError
from .frames import BindingContext
from .tokens import DEFAULT_SKEW, DEFAULT_TTL, ScopeToken, TrustAnchors, delegate, mint

SUBJECT_CLAIM = "subject"
ROLE_CLAIM = "role"


@dataclass(frozen=True)
class Authorization:
    token: ScopeToken
    initiator: AppraisalResult
    responder: AppraisalResult


class Verifier:
    """Holds the operator policy, the attester keys and the token issuer key."""

    def __init__(self, issuer_id: str, issuer_seed: bytes, policy: AppraisalPolicy,
                 attester_keys: dict[str, bytes], ttl: int = DEFAULT_TTL,
                 skew: int = DEFAULT_SKEW, rng: random.Random | None = None,
                 mutual: bool = True):
        self.issuer_id = issuer_id
        self._issuer_key, self.issuer_pubkey = keypair_from_seed(issuer_seed)
        self.policy = policy
        self.attester_keys = dict(attester_keys)
        self.ttl = ttl
        self.skew = skew
        self.rng = rng
        self.mutual = mutual
        # nonce horizon bounded by the policy's evidence age (2 x ttl by default)
        self.nonce_cache = NonceCache(window=policy.max_evidence_age)

    @property
    def anchors(self) -> TrustAnchors:
        return TrustAnchors({self.issuer_id: self.issuer_pubkey}, self.skew)

    def authorize(self, initiator_ev: Evidence, responder_ev: Evidence | None,
                  ctx: BindingContext, cb_hash: Digest, now: int) -> Authorization:
        """Appraise the initiator's then the responder's evidence and mint a token.

        Raises AuthorizationDenied naming the first failed check.
        """
        ini = appraise(initiator_ev, self.policy, cb_hash, ctx.nonce, self.nonce_cache,
                       self.attester_keys, now)
        if not ini.accepted:
            raise AuthorizationDenied(ini.reason, "initiator evidence")
        resp = ini
        if self.mutual:
            if responder_ev is None:
                raise AuthorizationDenied("AppraisalRejected", "responder evidence missing")
            resp = appraise(responder_ev, self.policy, cb_hash, ctx.nonce, self.nonce_cache,
                            self.attester_keys, now)
            if not resp.accepted:
                raise AuthorizationDenied(resp.reason, "responder evidence")
            if responder_ev.attester_id != host_of_audience(ctx.audience):
                raise AuthorizationDenied("AudienceMismatch",
                                          f"{responder_ev.attester_id!r} is not {ctx.audience!r}")
        subject = initiator_ev.claim(SUBJECT_CLAIM)
        if not subject or subject.split("/", 1)[0] != initiator_ev.attester_id:
            raise AuthorizationDenied("AppraisalRejected", "subject claim not vouched by attester")
        try:
            token = mint(self._issuer_key, self.issuer_id, ini, subject, ctx.audience, ctx.scope,
                         cb_hash, self.ttl, now, self.rng)
        except TokenError as exc:
            raise AuthorizationDenied(exc.reason, str(exc)) from None
        return Authorization(token, ini, resp)

    def delegate(self, parent: ScopeToken, child_scope: Scope, audience: str, now: int,
                 ttl: int | None = None) -> ScopeToken:
        return delegate(parent, child_scope, self._issuer_key, self.issuer_id, audience,
                        ttl or self.ttl, now, anchors=self.anchors, rng=self.rng)
