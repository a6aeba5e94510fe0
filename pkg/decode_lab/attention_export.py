import json
from typing import Dict, List

from decode_lab.schemas import AttentionRecord


class AttentionExporter:
    @staticmethod
    def to_dict(records: List[AttentionRecord]) -> Dict[str, dict]:
        """
        Keys records as "<side>/<layer>/<head>", e.g. "cross/1/3".
        """
        exported = {}
        for record in records:
            key = f"{record.side}/{record.layer}/{record.head}"
            exported[key] = {
                "weights": record.weights,
                "query_labels": record.query_labels,
                "key_labels": record.key_labels,
            }
        return exported

    @staticmethod
    def to_json(records: List[AttentionRecord]) -> str:
        return json.dumps(AttentionExporter.to_dict(records))

    @staticmethod
    def top_links(record: AttentionRecord, k: int = 5) -> List[dict]:
        """Strongest query -> key links of one head, for quick inspection."""
        links = []
        for i, row in enumerate(record.weights):
            for j, weight in enumerate(row):
                links.append({"query": record.query_labels[i], "key": record.key_labels[j], "weight": weight})
        links.sort(key=lambda link: -link["weight"])
        return links[:k]

    @staticmethod
    def generate_mermaid(record: AttentionRecord, k: int = 5) -> str:
        """
        Mermaid graph of the strongest links of one head (query tokens on the left).
        """
        graph = ["graph LR"]
        for n, link in enumerate(AttentionExporter.top_links(record, k)):
            graph.append(f'    Q{n}["{link["query"]}"] -->|{link["weight"]:.2f}| K{n}["{link["key"]}"]')
        return "\n".join(graph)
