#pragma once

// Newline-delimited JSON datasets: one trajectory per line, observable record under "obs"
// and the simulator-only record under "hidden". Doubles are printed with 17 significant
// digits so a round trip is exact.

#include "plan_iv/smdp_env.hpp"

#include <iosfwd>
#include <string>

namespace plan_iv {

std::string format_double(double x);

std::string observable_to_json(const ObservableTrajectory& obs);
std::string trajectory_to_ndjson_line(const Trajectory& traj);

void write_ndjson(const OfflineDataset& data, std::ostream& out);
OfflineDataset read_ndjson(std::istream& in);

ObservableTrajectory observable_from_json(const nlohmann::json& j);
/// Reads only the "obs" section of each line.
ObservableDataset read_observable_ndjson(std::istream& in);

}  // namespace plan_iv
