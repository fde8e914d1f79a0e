#pragma once

#include "tri/discovery.hpp"
#include "tri/reference_families.hpp"
#include "tri/triangulation.hpp"

#include "json.hpp"

#include <ostream>

namespace tri {

using Json = nlohmann::ordered_json;

inline constexpr int kWorldSnapshotVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

Json to_json(const SiteId& s);
Json to_json(const Circuit& c);
Circuit circuit_from_json(const Json& j);

Json to_json(const WorldSpec& spec);
WorldSpec world_spec_from_json(const Json& j);

// Versioned snapshot: spec plus every weight and bias.
Json world_snapshot(const World& world);
World world_from_snapshot(const Json& j);

Json to_json(const TranslationMap& m);
Json to_json(const ReferenceFamily& f);
Json to_json(const TriangulationReport& r);
Json to_json(const InterventionRecord& r);
Json to_json(const Thresholds& t);

void write_report_csv_header(std::ostream& os);
void write_report_csv_row(std::ostream& os, const TriangulationReport& r);

} // namespace tri
