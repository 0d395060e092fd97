// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include "peftlab/adapters.hpp"
#include "peftlab/matrix.hpp"

namespace peftlab {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  return Matrix(j.at("rows").get<Index>(), j.at("cols").get<Index>(),
                j.at("data").get<std::vector<double>>());
}

inline nlohmann::json adapter_config_to_json(const AdapterConfig& cfg) {
  return nlohmann::json{{"kind", to_string(cfg.kind)},
                        {"d_in", cfg.d_in},
                        {"d_out", cfg.d_out},
                        {"rank", cfg.rank},
                        {"experts", cfg.experts},
                        {"alpha", cfg.alpha},
                        {"router", to_string(cfg.router_kind)},
                        {"s_hidden", cfg.s_hidden},
                        {"seed", cfg.seed}};
}

inline AdapterConfig adapter_config_from_json(const nlohmann::json& j) {
  AdapterConfig cfg;
  cfg.kind = adapter_kind_from_string(j.at("kind").get<std::string>());
  cfg.d_in = j.at("d_in").get<Index>();
  cfg.d_out = j.at("d_out").get<Index>();
  cfg.rank = j.at("rank").get<Index>();
  cfg.experts = j.at("experts").get<Index>();
  cfg.alpha = j.at("alpha").get<double>();
  cfg.router_kind = router_kind_from_string(j.at("router").get<std::string>());
  cfg.s_hidden = j.at("s_hidden").get<Index>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace peftlab
