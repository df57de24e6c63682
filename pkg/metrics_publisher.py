#!/usr/bin/env python3
"""
Optional Elasticsearch publishing of benchmark rows

Every row written to metrics.csv can also be bulk-indexed into an
Elasticsearch index so runs from different machines and seeds can be
compared side by side. Connection settings come from the SIM2REAL_ES_*
environment variables (see config.publishing_config_from_env). When they are
missing or invalid the rows are written to a JSON file instead.
"""

import json
import logging
import os
from datetime import datetime, timezone
from typing import Dict, Any, List, Optional

from elasticsearch import Elasticsearch
from elasticsearch.helpers import bulk

from config import INDEX_MAPPING, publishing_config_from_env, validate_publishing_config

logger = logging.getLogger(__name__)

INTEGER_FIELDS = ("run_index", "budget", "violations", "off_track", "lateral_accel", "no_progress", "resets")


class MetricsPublisher:
    """Bulk indexer for benchmark metrics rows."""

    def __init__(self, es_config: Dict[str, Any]):
        self.es: Optional[Elasticsearch] = None
        self.es_config = es_config

    def connect(self) -> bool:
        """Connect to Elasticsearch and make sure the index exists."""
        try:
            connection_params = {
                'verify_certs': self.es_config.get('verify_certs', False),
                'request_timeout': 30
            }
            if self.es_config.get('auth_type') == 'api_key':
                connection_params['api_key'] = self.es_config['api_key']
            else:
                connection_params['basic_auth'] = (self.es_config['username'], self.es_config['password'])

            self.es = Elasticsearch([self.es_config['cluster_url']], **connection_params)
            info = self.es.info()
            logger.info(f"Connected to Elasticsearch cluster: {info['name']}")
            self._create_index_if_not_exists()
            return True

        except Exception as e:
            logger.error(f"Failed to connect to Elasticsearch: {str(e)}")
            return False

    def _create_index_if_not_exists(self):
        index_name = self.es_config['index']
        if not self.es.indices.exists(index=index_name):
            self.es.indices.create(index=index_name, body=INDEX_MAPPING)
            logger.info(f"Created index '{index_name}' with mapping")
        else:
            logger.info(f"Index '{index_name}' already exists")

    @staticmethod
    def to_document(row: Dict[str, Any], run_id: str, config_hash: str, indexed_at: str) -> Dict[str, Any]:
        doc = dict(row)
        for name in INTEGER_FIELDS:
            if name in doc and doc[name] not in ("", None):
                doc[name] = int(doc[name])
        doc['lap_time'] = float(doc.get('penalized_lap_time' if doc.get('penalty_applied') else 'lap_time', 0))
        doc['completed'] = bool(int(doc.get('completed', 0)))
        doc.update({'run_id': run_id, 'config_hash': config_hash, 'indexed_at': indexed_at})
        return doc

    @staticmethod
    def document_id(doc: Dict[str, Any]) -> str:
        return "-".join(str(doc.get(k, "")) for k in
                        ("run_id", "experiment", "mode", "system_id", "budget", "run_index"))

    def bulk_index_rows(self, rows: List[Dict[str, Any]], run_id: str, config_hash: str) -> bool:
        """Bulk index rows; returns True when every document was accepted."""
        if not rows:
            return True
        try:
            indexed_at = datetime.now(timezone.utc).isoformat()
            actions = []
            for row in rows:
                doc = self.to_document(row, run_id, config_hash, indexed_at)
                actions.append({
                    '_index': self.es_config['index'],
                    '_id': self.document_id(doc),
                    '_source': doc
                })

            success, failed = bulk(self.es, actions, index=self.es_config['index'], raise_on_error=False)
            logger.info(f"Bulk indexed {success} metrics rows successfully")
            if failed:
                logger.warning(f"{len(failed)} metrics rows failed to index")
            return len(failed) == 0

        except Exception as e:
            logger.error(f"Error in bulk indexing: {str(e)}")
            return False


def publish_rows(rows: List[Dict[str, Any]], run_id: str, config_hash: str, output_dir: str,
                 es_config: Optional[Dict[str, Any]] = None) -> bool:
    """
    Publish rows to Elasticsearch, or write them to a JSON file when no valid
    cluster configuration is available.

    Returns:
        True if the rows reached Elasticsearch
    """
    es_config = es_config or publishing_config_from_env()
    is_valid, error_msg = validate_publishing_config(es_config)
    if is_valid:
        publisher = MetricsPublisher(es_config)
        if publisher.connect() and publisher.bulk_index_rows(rows, run_id, config_hash):
            return True
    else:
        logger.warning(f"Elasticsearch publishing skipped: {error_msg}")

    fallback = os.path.join(output_dir, f"metrics_{run_id}.json")
    with open(fallback, 'w') as f:
        json.dump({'run_id': run_id, 'config_hash': config_hash, 'rows': rows}, f, indent=2, default=str)
    logger.info(f"Metrics rows saved to {fallback}")
    return False
