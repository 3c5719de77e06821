"""Query construction for the Copernicus catalogue and the EEA air-quality
download service. Nothing here touches the network; callers send the
returned URL/parameters with the HTTP client of their choice."""

from datetime import date, datetime, timezone
from urllib.parse import urlencode

COPERNICUS_ODATA = "https://catalogue.dataspace.copernicus.eu/odata/v1/Products"
EEA_PARQUET_API = "https://eeadmz1-downloads-api-appservice.azurewebsites.net/ParquetFile/urls"
EEA_NO2 = "http://dd.eionet.europa.eu/vocabulary/aq/pollutant/8"

PRODUCTS = {
    "s2-l2a": ("SENTINEL-2", "S2MSI2A"),
    "s5p-no2": ("SENTINEL-5P", "L2__NO2___"),
}
EEA_DATASETS = {"up-to-date": 1, "verified": 2, "historical": 3}


def _stamp(t):
    if isinstance(t, datetime):
        t = t.astimezone(timezone.utc) if t.tzinfo else t.replace(tzinfo=timezone.utc)
    else:
        t = datetime(t.year, t.month, t.day, tzinfo=timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%S.000Z")


def _polygon(bbox):
    west, south, east, north = bbox
    if not (-180 <= west < east <= 180 and -90 <= south < north <= 90):
        raise ValueError(f"bbox must be (west, south, east, north) in degrees, got {bbox}")
    ring = [(west, south), (east, south), (east, north), (west, north), (west, south)]
    return "POLYGON((" + ",".join(f"{x} {y}" for x, y in ring) + "))"


def copernicus_query(product, bbox, start, end, max_cloud=None, top=100):
    """OData search URL for ``product`` ("s2-l2a" or "s5p-no2") over a bbox and time range."""
    if product not in PRODUCTS:
        raise ValueError(f"unknown product {product!r}; expected one of {sorted(PRODUCTS)}")
    if _stamp(start) >= _stamp(end):
        raise ValueError("start must precede end")
    collection, ptype = PRODUCTS[product]
    clauses = [
        f"Collection/Name eq '{collection}'",
        "Attributes/OData.CSC.StringAttribute/any(att:att/Name eq 'productType' and "
        f"att/OData.CSC.StringAttribute/Value eq '{ptype}')",
        f"OData.CSC.Intersects(area=geography'SRID=4326;{_polygon(bbox)}')",
        f"ContentDate/Start ge {_stamp(start)}",
        f"ContentDate/Start lt {_stamp(end)}",
    ]
    if max_cloud is not None:
        clauses.append("Attributes/OData.CSC.DoubleAttribute/any(att:att/Name eq 'cloudCover' and "
                       f"att/OData.CSC.DoubleAttribute/Value le {float(max_cloud):.2f})")
    params = {"$filter": " and ".join(clauses), "$orderby": "ContentDate/Start asc", "$top": top}
    return f"{COPERNICUS_ODATA}?{urlencode(params)}"


def eea_request(countries, start=date(2018, 1, 1), end=date(2021, 1, 1), dataset="verified"):
    """JSON body for the EEA download service: hourly NO2 for ``countries``."""
    if dataset not in EEA_DATASETS:
        raise ValueError(f"unknown dataset {dataset!r}; expected one of {sorted(EEA_DATASETS)}")
    countries = [countries] if isinstance(countries, str) else list(countries)
    if not countries or any(len(c) != 2 or not c.isalpha() for c in countries):
        raise ValueError(f"countries must be two-letter codes, got {countries}")
    return {"countries": [c.upper() for c in countries], "cities": [], "pollutants": [EEA_NO2],
            "dataset": EEA_DATASETS[dataset], "dateTimeStart": _stamp(start),
            "dateTimeEnd": _stamp(end), "aggregationType": "hour"}
