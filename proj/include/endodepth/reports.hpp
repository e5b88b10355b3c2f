#pragma once

#include <json.hpp>

#include "endodepth/metrics.hpp"
#include "endodepth/trainer.hpp"

namespace endodepth {

nlohmann::json to_json(const AccuracyReport& r);
nlohmann::json to_json(const ComplexityReport& r);
nlohmann::json to_json(const EvalOutput& r);

}  // namespace endodepth
