"""
Replay buffer of per-agent transitions with NDJSON export
"""
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from scalecomm_utils import IncompatibleArtifactError, MissingArtifactError, StructuralError


@dataclass
class TrajectoryRecord:
    episode: int
    t: int
    agent: int
    obs: np.ndarray
    mask: np.ndarray
    action: int
    reward: float
    done: bool
    label: int

    def to_json(self):
        return {
            'episode': self.episode,
            't': self.t,
            'agent': self.agent,
            'obs': [float(v) for v in self.obs],
            'mask': [bool(v) for v in self.mask],
            'action': self.action,
            'reward': self.reward,
            'done': self.done,
            'label': self.label,
        }

    @classmethod
    def from_json(cls, row):
        return cls(
            episode=int(row['episode']),
            t=int(row['t']),
            agent=int(row['agent']),
            obs=np.asarray(row['obs'], dtype=np.float64),
            mask=np.asarray(row['mask'], dtype=bool),
            action=int(row['action']),
            reward=float(row['reward']),
            done=bool(row['done']),
            label=int(row['label']),
        )


class TrajectoryBuffer:
    """
    Ordered collection of TrajectoryRecord rows

    Rows of one (episode, agent) pair must arrive with strictly increasing t.
    """

    def __init__(self, obs_dim, k_candidates):
        self.obs_dim = obs_dim
        self.k_candidates = k_candidates
        self.records: List[TrajectoryRecord] = []
        self._index: Dict[Tuple[int, int, int], int] = {}
        self._last_t: Dict[Tuple[int, int], int] = {}
        self._arrays = None

    def __len__(self):
        return len(self.records)

    def add(self, record: TrajectoryRecord):
        if len(record.obs) != self.obs_dim:
            raise StructuralError(f"observation length {len(record.obs)} != {self.obs_dim}")
        if len(record.mask) != self.k_candidates:
            raise StructuralError(f"mask length {len(record.mask)} != {self.k_candidates}")
        lane = (record.episode, record.agent)
        if lane in self._last_t and record.t <= self._last_t[lane]:
            raise StructuralError(
                f"t must increase within episode {record.episode} agent {record.agent}"
            )
        self._last_t[lane] = record.t
        self._index[(record.episode, record.t, record.agent)] = len(self.records)
        self.records.append(record)
        self._arrays = None

    def position(self, episode, t, agent) -> Optional[int]:
        """Row index of (episode, t, agent), or None"""
        return self._index.get((episode, t, agent))

    @property
    def n_agents(self):
        return 1 + max((r.agent for r in self.records), default=-1)

    def groups(self):
        """(episode, t) keys holding a row for every agent, in insertion order"""
        n = self.n_agents
        seen = []
        for r in self.records:
            if r.agent == 0 and all(self.position(r.episode, r.t, a) is not None for a in range(n)):
                seen.append((r.episode, r.t))
        return seen

    def arrays(self):
        """Column arrays over all rows (cached until the next add)"""
        if self._arrays is None:
            self._arrays = {
                'obs': np.array([r.obs for r in self.records]).reshape(-1, self.obs_dim),
                'mask': np.array([r.mask for r in self.records], dtype=bool).reshape(-1, self.k_candidates),
                'action': np.array([r.action for r in self.records], dtype=np.int64),
                'reward': np.array([r.reward for r in self.records]),
                'done': np.array([r.done for r in self.records], dtype=bool),
                'label': np.array([r.label for r in self.records], dtype=np.int64),
                'episode': np.array([r.episode for r in self.records], dtype=np.int64),
                't': np.array([r.t for r in self.records], dtype=np.int64),
                'agent': np.array([r.agent for r in self.records], dtype=np.int64),
            }
        return self._arrays

    def save_ndjson(self, path):
        """Write one JSON object per line; a header line carries the dimensions"""
        with open(path, 'w', encoding='utf-8') as f:
            f.write(json.dumps({'obs_dim': self.obs_dim, 'k_candidates': self.k_candidates}) + "\n")
            for r in self.records:
                f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
        return len(self.records)

    @classmethod
    def load_ndjson(cls, path, obs_dim=None):
        if not os.path.exists(path):
            raise MissingArtifactError(f"trajectory buffer not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            header = json.loads(f.readline())
            if obs_dim is not None and header['obs_dim'] != obs_dim:
                raise IncompatibleArtifactError(
                    f"buffer observation dim {header['obs_dim']} != configured {obs_dim}"
                )
            buffer = cls(header['obs_dim'], header['k_candidates'])
            for line in f:
                if line.strip():
                    buffer.add(TrajectoryRecord.from_json(json.loads(line)))
        return buffer
