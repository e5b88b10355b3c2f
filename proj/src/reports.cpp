#include "endodepth/reports.hpp"

namespace endodepth {

using nlohmann::json;

json to_json(const AccuracyReport& r) {
  return json{{"abs_rel", r.abs_rel},   {"sq_rel", r.sq_rel}, {"rmse", r.rmse},
              {"rmse_log", r.rmse_log}, {"delta1", r.delta1}, {"delta2", r.delta2},
              {"delta3", r.delta3},     {"n_pixels", r.n_pixels}};
}

json to_json(const ComplexityReport& r) {
  return json{{"param_count", r.param_count},
              {"flops", r.flops},
              {"fps", r.fps},
              {"fps_std", r.fps_std},
              {"input_width", r.input_width},
              {"input_height", r.input_height},
              {"warmup", r.warmup},
              {"iters", r.iters},
              {"repetitions", r.repetitions},
              {"flop_convention", r.flop_convention}};
}

json to_json(const EvalOutput& r) {
  return json{{"accuracy", to_json(r.accuracy)},
              {"accuracy_unscaled", to_json(r.accuracy_unscaled)},
              {"complexity", to_json(r.complexity)}};
}

}  // namespace endodepth
