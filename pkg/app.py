from flask import Flask, jsonify, request
from flask_sqlalchemy import SQLAlchemy
from sqlalchemy import func
from datetime import datetime, timedelta
import json
import logging
import os

from precoders.experiment import METHODS

logging.basicConfig(level=os.environ.get('UCN_LOG_LEVEL', 'INFO').upper())
log = logging.getLogger('archive')

app = Flask(__name__)

# --- Database configuration ---
DATABASE_URL = os.environ.get('DATABASE_URL', 'sqlite:///results.db')
if DATABASE_URL.startswith('postgres://'):
    DATABASE_URL = DATABASE_URL.replace('postgres://', 'postgresql://', 1)

# Ensure SSL on hosted Postgres unless already set
if DATABASE_URL.startswith('postgresql://') and 'sslmode=' not in DATABASE_URL:
    sep = '&' if '?' in DATABASE_URL else '?'
    DATABASE_URL = f"{DATABASE_URL}{sep}sslmode=require"

app.config['SQLALCHEMY_DATABASE_URI'] = DATABASE_URL
app.config['SQLALCHEMY_TRACK_MODIFICATIONS'] = False
app.config['SQLALCHEMY_ENGINE_OPTIONS'] = {'pool_pre_ping': True}

db = SQLAlchemy(app)

MAX_RESULT_LIMIT = 5000


# --- Models ---
class Run(db.Model):
    __tablename__ = 'runs'
    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.String(64), nullable=False, unique=True, index=True)
    seed = db.Column(db.String(24))
    trials = db.Column(db.Integer)
    config = db.Column(db.Text)
    created_at = db.Column(db.DateTime, default=datetime.utcnow)
    results = db.relationship('Result', backref='run', lazy='dynamic', cascade='all, delete-orphan')

    def to_dict(self):
        return {
            'run_id': self.run_id,
            'seed': self.seed,
            'trials': self.trials,
            'config': json.loads(self.config) if self.config else None,
            'created_at': self.created_at.isoformat() if self.created_at else None,
            'result_count': self.results.count(),
        }


class Result(db.Model):
    __tablename__ = 'results'
    id = db.Column(db.Integer, primary_key=True)
    run_pk = db.Column(db.Integer, db.ForeignKey('runs.id'), nullable=False, index=True)
    trial = db.Column(db.Integer, nullable=False)
    # u64 channel seeds overflow signed BIGINT
    seed = db.Column(db.String(24), nullable=False)
    power_dbm = db.Column(db.Float, nullable=False, index=True)
    bsc = db.Column(db.Integer, nullable=False, index=True)
    method = db.Column(db.String(16), nullable=False, index=True)
    outer_iter = db.Column(db.Integer, default=0)
    wsr_bits = db.Column(db.Float)
    grad_norm = db.Column(db.Float)
    inner_iters = db.Column(db.Integer, default=0)
    wall_ms = db.Column(db.Float, default=0.0)
    status = db.Column(db.String(64), nullable=False, default='ok', index=True)

    def to_dict(self):
        return {
            'trial': self.trial,
            'seed': self.seed,
            'power_dbm': self.power_dbm,
            'bsc': self.bsc,
            'method': self.method,
            'outer_iter': self.outer_iter,
            'wsr_bits': self.wsr_bits,
            'grad_norm': self.grad_norm,
            'inner_iters': self.inner_iters,
            'wall_ms': self.wall_ms,
            'status': self.status,
        }


# --- One-time DB init at import (Flask 3.x compatible) ---
def _init_db_once():
    try:
        with app.app_context():
            db.create_all()
    except Exception as e:
        log.error("DB init error: %s", e)
        try:
            db.session.rollback()
        except Exception:
            pass


_init_db_once()


def _get_run_or_404(run_id):
    return Run.query.filter_by(run_id=run_id).first_or_404(description=f'unknown run {run_id}')


# --- API Endpoints ---
@app.route('/health', methods=['GET'])
def health_check():
    return jsonify({'status': 'healthy', 'timestamp': datetime.utcnow().isoformat()})


@app.route('/api/runs', methods=['GET'])
def get_runs():
    runs = Run.query.order_by(Run.created_at.desc(), Run.id.desc()).all()
    return jsonify({'runs': [r.to_dict() for r in runs], 'count': len(runs)})


@app.route('/api/runs/<run_id>/results', methods=['GET'])
def get_results(run_id):
    run = _get_run_or_404(run_id)
    query = Result.query.filter_by(run_pk=run.id)
    method = request.args.get('method')
    if method:
        query = query.filter(Result.method == method.lower())
    bsc = request.args.get('bsc', type=int)
    if bsc is not None:
        query = query.filter(Result.bsc == bsc)
    power = request.args.get('power_dbm', type=float)
    if power is not None:
        query = query.filter(Result.power_dbm == power)
    status = request.args.get('status')
    if status:
        query = query.filter(Result.status == status)

    query = query.order_by(Result.id.asc())
    limit = request.args.get('limit', 1000, type=int)
    rows = query.limit(max(1, min(limit, MAX_RESULT_LIMIT))).all()
    return jsonify({'run_id': run_id, 'results': [r.to_dict() for r in rows], 'count': len(rows)})


@app.route('/api/runs/<run_id>/summary', methods=['GET'])
def get_summary(run_id):
    run = _get_run_or_404(run_id)
    cells = db.session.query(
        Result.power_dbm,
        Result.bsc,
        Result.method,
        func.count(Result.id),
        func.avg(Result.wsr_bits),
        func.avg(Result.outer_iter),
    ).filter(
        Result.run_pk == run.id,
        Result.status == 'ok',
    ).group_by(
        Result.power_dbm, Result.bsc, Result.method,
    ).order_by(
        Result.power_dbm, Result.bsc, Result.method,
    ).all()
    summary = [
        {
            'power_dbm': power,
            'bsc': bsc,
            'method': method,
            'ok_trials': count,
            'mean_wsr_bits': mean_wsr,
            'mean_outer_iter': mean_outer,
        }
        for power, bsc, method, count, mean_wsr, mean_outer in cells
    ]
    return jsonify({'run_id': run_id, 'summary': summary, 'count': len(summary)})


# --- HARDENED BULK ENDPOINT ---
_REQUIRED_ROW_FIELDS = ('trial', 'seed', 'power_dbm', 'bsc', 'method')


def _coerce_row(incoming):
    """Validated column dict for one uploaded row; raises ValueError with the reason."""
    if not isinstance(incoming, dict):
        raise ValueError('row is not an object')
    missing = [k for k in _REQUIRED_ROW_FIELDS if incoming.get(k) is None]
    if missing:
        raise ValueError(f"missing {'/'.join(missing)}")
    method = str(incoming['method']).lower()
    if method not in METHODS:
        raise ValueError(f'unknown method {method!r}')
    status = str(incoming.get('status') or 'ok')[:64]
    wsr = incoming.get('wsr_bits')
    if status == 'ok' and wsr is None:
        raise ValueError('ok row without wsr_bits')
    if wsr is not None and float(wsr) < 0:
        raise ValueError('wsr_bits must be nonnegative')
    grad = incoming.get('grad_norm')
    return {
        'trial': int(incoming['trial']),
        'seed': str(int(incoming['seed'])),
        'power_dbm': float(incoming['power_dbm']),
        'bsc': int(incoming['bsc']),
        'method': method,
        'outer_iter': int(incoming.get('outer_iter') or 0),
        'wsr_bits': None if wsr is None else float(wsr),
        'grad_norm': None if grad is None else float(grad),
        'inner_iters': int(incoming.get('inner_iters') or 0),
        'wall_ms': float(incoming.get('wall_ms') or 0.0),
        'status': status,
    }


@app.route('/api/admin/results/bulk', methods=['POST'])
def bulk_add_results():
    data = request.get_json(silent=True)
    if not isinstance(data, dict) or not isinstance(data.get('run'), dict) or not isinstance(data.get('rows'), list):
        return jsonify({'error': 'Expected {"run": {...}, "rows": [...]}'}), 400
    meta = data['run']
    run_id = str(meta.get('run_id') or '').strip()
    if not run_id or len(run_id) > 64:
        return jsonify({'error': 'run.run_id is required (max 64 chars)'}), 400
    trials = meta.get('trials')
    if trials is not None:
        try:
            trials = int(trials)
        except (TypeError, ValueError):
            return jsonify({'error': f'run.trials must be an integer, got {trials!r}'}), 400

    # re-upload of a run replaces its rows
    run = Run.query.filter_by(run_id=run_id).first()
    if run:
        Result.query.filter_by(run_pk=run.id).delete()
    else:
        run = Run(run_id=run_id)
        db.session.add(run)
    run.seed = None if meta.get('seed') is None else str(meta['seed'])
    run.trials = trials
    run.config = json.dumps(meta.get('config')) if meta.get('config') is not None else None
    db.session.flush()

    rows = data['rows']
    added = 0
    skipped = 0
    errors = []
    for idx, incoming in enumerate(rows):
        try:
            db.session.add(Result(run_pk=run.id, **_coerce_row(incoming)))
            added += 1
        except (TypeError, ValueError) as e:
            skipped += 1
            errors.append(f"row {idx}: {e}")

    db.session.commit()
    log.info("stored run %s: %d rows added, %d skipped", run_id, added, skipped)
    return jsonify({
        'success': True,
        'run_id': run_id,
        'rows_processed': len(rows),
        'rows_added': added,
        'rows_skipped': skipped,
        'errors': errors[:20],
    })


@app.route('/api/admin/runs/cleanup', methods=['POST'])
def cleanup_old_runs():
    days = request.args.get('days', 30, type=int)
    cutoff_date = datetime.utcnow() - timedelta(days=max(days, 0))
    old = Run.query.filter(Run.created_at < cutoff_date).all()
    for run in old:
        db.session.delete(run)
    db.session.commit()
    return jsonify({'success': True, 'deleted_count': len(old)})


if __name__ == '__main__':
    port = int(os.environ.get('PORT', 5000))
    app.run(host='0.0.0.0', port=port, debug=True)
