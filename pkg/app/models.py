"""
Registry Models
SQLAlchemy models recording CLI runs and ablation cells
"""
from datetime import datetime

from sqlalchemy import JSON, Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from app.database import Base


class RunRecord(Base):
    """One CLI invocation (gen-data, train, eval or ablate)"""
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    command = Column(String(32), nullable=False, index=True)
    config_path = Column(Text)
    config_hash = Column(String(64), index=True)
    output_dir = Column(Text)
    artifact_version = Column(String(32))

    started_at = Column(DateTime, default=datetime.utcnow, nullable=False)
    finished_at = Column(DateTime)
    exit_code = Column(Integer)
    error_message = Column(Text)

    cells = relationship('AblationCell', back_populates='run', cascade='all, delete-orphan')

    def __repr__(self):
        return f'<RunRecord {self.id} {self.command} exit={self.exit_code}>'

    def to_dict(self):
        return {
            'id': self.id,
            'command': self.command,
            'config_path': self.config_path,
            'config_hash': self.config_hash,
            'output_dir': self.output_dir,
            'artifact_version': self.artifact_version,
            'started_at': self.started_at.isoformat() if self.started_at else None,
            'finished_at': self.finished_at.isoformat() if self.finished_at else None,
            'exit_code': self.exit_code,
        }


class AblationCell(Base):
    """One (parameter assignment, seed) cell of an ablation sweep"""
    __tablename__ = 'ablation_cells'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'), nullable=False, index=True)
    cell_index = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)
    params = Column(JSON)
    config_hash = Column(String(64))
    knn_accuracy = Column(Float)
    runtime_seconds = Column(Float)
    state_mb = Column(Float)
    peak_memory_mb = Column(Float)
    status = Column(String(20), default='ok')  # ok, failed

    run = relationship('RunRecord', back_populates='cells')

    def __repr__(self):
        return f'<AblationCell run={self.run_id} #{self.cell_index} seed={self.seed}>'
