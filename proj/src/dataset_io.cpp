#include "plan_iv/dataset_io.hpp"

#include <fmt/format.h>

#include <istream>
#include <ostream>

namespace plan_iv {

namespace {

void append_vec(std::string& out, const Vec& v) {
  out += '[';
  for (Index k = 0; k < v.size(); ++k) {
    if (k) out += ',';
    out += format_double(v[k]);
  }
  out += ']';
}

void append_vecs(std::string& out, const std::vector<Vec>& vs) {
  out += '[';
  for (std::size_t k = 0; k < vs.size(); ++k) {
    if (k) out += ',';
    append_vec(out, vs[k]);
  }
  out += ']';
}

std::vector<Vec> vecs_from_json(const nlohmann::json& j) {
  std::vector<Vec> out;
  for (const auto& row : j) {
    auto v = row.get<std::vector<double>>();
    out.push_back(Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size())));
  }
  return out;
}

}  // namespace

std::string format_double(double x) { return fmt::format("{:.17g}", x); }

std::string observable_to_json(const ObservableTrajectory& obs) {
  std::string out = "{\"s\":";
  append_vecs(out, obs.states);
  out += ",\"a\":";
  append_vecs(out, obs.actions);
  out += ",\"a_index\":[";
  for (std::size_t k = 0; k < obs.action_indices.size(); ++k) {
    if (k) out += ',';
    out += std::to_string(obs.action_indices[k]);
  }
  out += "],\"o\":";
  append_vecs(out, obs.observations);
  out += ",\"r\":[";
  for (std::size_t k = 0; k < obs.rewards.size(); ++k) {
    if (k) out += ',';
    out += format_double(obs.rewards[k]);
  }
  out += "]}";
  return out;
}

std::string trajectory_to_ndjson_line(const Trajectory& traj) {
  std::string out = "{\"obs\":" + observable_to_json(traj.obs) + ",\"hidden\":{\"i\":";
  append_vecs(out, traj.hidden.types);
  out += ",\"b\":";
  append_vecs(out, traj.hidden.agent_actions);
  out += "}}";
  return out;
}

void write_ndjson(const OfflineDataset& data, std::ostream& out) {
  for (const auto& t : data.trajectories) out << trajectory_to_ndjson_line(t) << '\n';
}

ObservableTrajectory observable_from_json(const nlohmann::json& j) {
  ObservableTrajectory obs;
  obs.states = vecs_from_json(j.at("s"));
  obs.actions = vecs_from_json(j.at("a"));
  obs.action_indices = j.at("a_index").get<std::vector<std::size_t>>();
  obs.observations = vecs_from_json(j.at("o"));
  obs.rewards = j.at("r").get<std::vector<double>>();
  return obs;
}

OfflineDataset read_ndjson(std::istream& in) {
  OfflineDataset data;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      Trajectory t;
      t.obs = observable_from_json(j.at("obs"));
      if (j.contains("hidden")) {
        t.hidden.types = vecs_from_json(j.at("hidden").at("i"));
        t.hidden.agent_actions = vecs_from_json(j.at("hidden").at("b"));
      }
      data.trajectories.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed dataset line: ") + e.what());
  }
  return data;
}

ObservableDataset read_observable_ndjson(std::istream& in) {
  ObservableDataset data;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      data.trajectories.push_back(observable_from_json(nlohmann::json::parse(line).at("obs")));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed dataset line: ") + e.what());
  }
  return data;
}

}  // namespace plan_iv
