from pydantic import BaseModel

from dlgmoe.router.router_model import RoutingTable


class RoutingRecord(BaseModel):
    utt_id: str
    lang_ids: list[int]
    source: str
    layer: int = 0

    @classmethod
    def from_table(cls, utt_id: str, table: RoutingTable, layer: int = 0) -> "RoutingRecord":
        return cls(
            utt_id=utt_id,
            lang_ids=[int(i) for i in table.lang_ids],
            source=table.source_label,
            layer=layer,
        )
