#include "dragonfly/models.hpp"

#include <cmath>
#include <stdexcept>

namespace dragonfly {

namespace {

struct FrustumRow {
  FrustumShape shape;
  const char* name;
  std::vector<Index> channels;
};

const std::vector<FrustumRow>& frustum_table() {
  static const std::vector<FrustumRow> table = {
      {FrustumShape::CylindricWide, "cylindric-wide", {128}},
      {FrustumShape::CylindricElongated, "cylindric-elongated", {32, 32, 32}},
      {FrustumShape::Contractive, "contractive", {96, 64, 32}},
      {FrustumShape::Hyperbolic, "hyperbolic", {80, 48, 80}},
      {FrustumShape::Ovoid, "ovoid", {48, 80, 48}},
      {FrustumShape::Expansive, "expansive", {32, 64, 96}},
  };
  return table;
}

const FrustumRow& frustum_row(FrustumShape shape) {
  for (const auto& row : frustum_table())
    if (row.shape == shape) return row;
  throw std::logic_error("unknown frustum shape");
}

std::string net(int index) { return "N" + std::to_string(index); }

Index conv_extent(Index in, Index kernel, PaddingMode padding, const std::string& stage) {
  const Index pad = padding == PaddingMode::Same ? (kernel - 1) / 2 : 0;
  return output_extent(in, kernel, 1, pad, pad, stage);
}

PoolOptions pool_options(Index h, Index w, Index window, Index stride, PaddingMode padding) {
  PoolOptions opt;
  opt.window = window;
  opt.stride = stride;
  if (padding == PaddingMode::Same) {
    std::tie(opt.pad_top, opt.pad_bottom) = same_padding(h, window, stride);
    std::tie(opt.pad_left, opt.pad_right) = same_padding(w, window, stride);
  }
  return opt;
}

Shape pool_shape(const Shape& in, Index window, Index stride, PaddingMode padding, const std::string& stage) {
  const PoolOptions o = pool_options(in[1], in[2], window, stride, padding);
  return {in[0], output_extent(in[1], window, stride, o.pad_top, o.pad_bottom, stage),
          output_extent(in[2], window, stride, o.pad_left, o.pad_right, stage)};
}

}  // namespace

PoolStage parse_pool_stage(const std::string& token, bool average) {
  const LayerSpec layer = parse_layer_notation(token);
  if (average) {
    if (const auto* p = std::get_if<AvgPoolLayer>(&layer)) return {p->window, p->stride};
  } else if (const auto* p = std::get_if<MaxPoolLayer>(&layer)) {
    return {p->window, p->stride};
  }
  throw ParseError("expected " + std::string(average ? "an average" : "a max") + " pool token, got '" + token + "'",
                   0);
}

std::string to_string(FrustumShape shape) { return frustum_row(shape).name; }

FrustumShape parse_frustum_shape(const std::string& text) {
  for (const auto& row : frustum_table())
    if (text == row.name) return row.shape;
  throw ParseError("unknown frustum shape '" + text + "'", 0);
}

std::vector<Index> canonical_frustum(FrustumShape shape, double width_scale) {
  if (!(width_scale > 0.0) || !std::isfinite(width_scale)) {
    throw std::invalid_argument("canonical_frustum: width_scale must be positive, got " + std::to_string(width_scale));
  }
  const auto& base = frustum_row(shape).channels;
  std::vector<Index> out;
  bool any_nonzero = false;
  for (Index c : base) {
    const auto scaled = static_cast<Index>(std::llround(static_cast<double>(c) * width_scale));
    any_nonzero = any_nonzero || scaled >= 1;
    out.push_back(std::max<Index>(scaled, 1));
  }
  // Individual sections clamp to 1; a scale that rounds the whole frustum away is rejected.
  if (!any_nonzero) {
    throw std::invalid_argument("canonical_frustum: width_scale " + std::to_string(width_scale) +
                                " rounds every section of " + to_string(shape) + " to 0 channels");
  }
  return out;
}

std::string to_string(ConvKind kind) { return kind == ConvKind::Conv2D ? "2D-C" : "DSC"; }

std::string to_string(PaddingMode mode) { return mode == PaddingMode::Same ? "same" : "valid"; }

PaddingMode parse_padding_mode(const std::string& text) {
  if (text == "same") return PaddingMode::Same;
  if (text == "valid") return PaddingMode::Valid;
  throw ParseError("padding must be 'same' or 'valid', got '" + text + "'", 0);
}

BranchSpec canonical_branch(int index, double width_scale) {
  if (index < 1 || index > kBranchCount) throw std::out_of_range("branch index must be 1..12, got " + std::to_string(index));
  static const FrustumShape shapes[6] = {FrustumShape::CylindricWide, FrustumShape::CylindricElongated,
                                         FrustumShape::Contractive,   FrustumShape::Hyperbolic,
                                         FrustumShape::Ovoid,         FrustumShape::Expansive};
  const int column = (index - 1) % 6;  // 0..5 within a generation
  BranchSpec spec;
  spec.index = index;
  spec.conv = index <= 6 ? ConvKind::Conv2D : ConvKind::Dsc;
  spec.shape = shapes[column];
  spec.width_scale = width_scale;
  switch (column) {
    case 0:
      spec.final_avg = {7, 3};
      spec.final_max = {11, 5};
      break;
    case 1:
    case 2:
      spec.final_avg = {5, 1};
      spec.final_max = {5, 2};
      break;
    case 3:
    case 4:
      spec.final_avg = {5, 1};
      spec.final_max = {7, 3};
      break;
    default:
      spec.final_avg = {5, 2};
      spec.final_max = {5, 2};
      break;
  }
  return spec;
}

const std::vector<IntegratorWiring>& dragonfly_wiring() {
  static const std::vector<IntegratorWiring> wiring = {
      {13, {1, 2}},
      {14, {3, 4, 5, 6}},
      {15, {7, 8}},
      {16, {9, 10, 11, 12}},
      {17, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16}},
  };
  return wiring;
}

Index BranchPlan::parameter_count() const {
  Index n = 0;
  for (const auto& [name, shape] : parameter_shapes) n += shape_size(shape);
  return n;
}

Index BranchPlan::conv_parameter_count() const {
  Index n = 0;
  for (const auto& [name, shape] : parameter_shapes) {
    if (name.find(".conv.") != std::string::npos) n += shape_size(shape);
  }
  return n;
}

std::vector<std::string> BranchPlan::notation() const {
  std::vector<std::string> out;
  for (const auto& stage : stages) out.push_back(format_layer(stage.layer));
  return out;
}

BranchPlan build_branch(const BranchSpec& spec, Index classes, InputDims input, PaddingMode padding) {
  if (classes < 2) throw ShapeError("build_branch: need at least 2 classes, got " + std::to_string(classes));
  if (input.height < 1 || input.width < 1 || input.channels < 1) throw ShapeError("build_branch: empty input extent");
  BranchPlan plan;
  plan.spec = spec;
  plan.classes = classes;
  plan.input = input;
  plan.padding = padding;
  plan.channels = canonical_frustum(spec.shape, spec.width_scale);

  const std::string n = net(spec.index);
  Shape cur{input.channels, input.height, input.width};
  auto push = [&](LayerSpec layer, const std::string& name, Shape out) {
    plan.stages.push_back(Stage{std::move(layer), name, out});
    cur = std::move(out);
  };
  auto stage_label = [](const std::string& name, const LayerSpec& layer) {
    return name + " (" + format_layer(layer) + ")";
  };

  const Index L = spec.kernel;
  for (std::size_t i = 0; i < plan.channels.size(); ++i) {
    const Index cin = cur[0], cout = plan.channels[i];
    const std::string block = n + ".block" + std::to_string(i + 1);
    const std::string conv_name = block + ".conv";
    LayerSpec conv = spec.conv == ConvKind::Conv2D ? LayerSpec(Conv2DLayer{L, cout}) : LayerSpec(DscLayer{L, cout});
    const Index h = conv_extent(cur[1], L, padding, stage_label(conv_name, conv));
    const Index w = conv_extent(cur[2], L, padding, stage_label(conv_name, conv));
    if (spec.conv == ConvKind::Conv2D) {
      plan.parameter_shapes[conv_name + ".weight"] = {cout, cin, L, L};
    } else {
      plan.parameter_shapes[conv_name + ".depthwise"] = {cin, 1, L, L};
      plan.parameter_shapes[conv_name + ".pointwise"] = {cout, cin};
    }
    push(conv, conv_name, {cout, h, w});

    plan.parameter_shapes[block + ".bn.gamma"] = {cout};
    plan.parameter_shapes[block + ".bn.beta"] = {cout};
    push(BatchNormLayer{}, block + ".bn", cur);

    if (i + 1 < plan.channels.size()) {
      const LayerSpec pool = MaxPoolLayer{spec.block_pool.window, spec.block_pool.stride};
      push(pool, block + ".pool",
           pool_shape(cur, spec.block_pool.window, spec.block_pool.stride, padding, stage_label(block + ".pool", pool)));
      push(ReluLayer{}, block + ".relu", cur);
    }
  }
  const LayerSpec avg = AvgPoolLayer{spec.final_avg.window, spec.final_avg.stride};
  push(avg, n + ".avgpool",
       pool_shape(cur, spec.final_avg.window, spec.final_avg.stride, padding, stage_label(n + ".avgpool", avg)));
  const LayerSpec max = MaxPoolLayer{spec.final_max.window, spec.final_max.stride};
  push(max, n + ".maxpool",
       pool_shape(cur, spec.final_max.window, spec.final_max.stride, padding, stage_label(n + ".maxpool", max)));

  plan.feature_length = shape_size(cur);
  plan.parameter_shapes[n + ".dcn.weight"] = {classes, plan.feature_length};
  push(DcnLayer{}, n + ".dcn", {classes});
  push(SoftmaxLayer{}, n + ".softmax", {classes});
  return plan;
}

EnsembleSpec dragonfly_spec(Index classes, InputDims input, double width_scale, PaddingMode padding,
                            IntegratorMode integrator_mode) {
  EnsembleSpec spec;
  spec.classes = classes;
  spec.input = input;
  spec.width_scale = width_scale;
  spec.padding = padding;
  spec.integrator_mode = integrator_mode;
  for (int b = 1; b <= kBranchCount; ++b) spec.branches.push_back(canonical_branch(b, width_scale));
  spec.integrators = dragonfly_wiring();
  return spec;
}

nlohmann::json to_json(const EnsembleSpec& spec) {
  nlohmann::json j;
  j["classes"] = spec.classes;
  j["input"] = {{"height", spec.input.height}, {"width", spec.input.width}, {"channels", spec.input.channels}};
  j["width_scale"] = spec.width_scale;
  j["padding"] = to_string(spec.padding);
  j["integrator_mode"] = to_string(spec.integrator_mode);
  j["branches"] = nlohmann::json::array();
  for (const auto& b : spec.branches) {
    nlohmann::json jb;
    jb["index"] = b.index;
    jb["conv"] = to_string(b.conv);
    jb["shape"] = to_string(b.shape);
    jb["kernel"] = b.kernel;
    jb["width_scale"] = b.width_scale;
    jb["channels"] = canonical_frustum(b.shape, b.width_scale);
    jb["block_pool"] = format_layer(MaxPoolLayer{b.block_pool.window, b.block_pool.stride});
    jb["final_avg"] = format_layer(AvgPoolLayer{b.final_avg.window, b.final_avg.stride});
    jb["final_max"] = format_layer(MaxPoolLayer{b.final_max.window, b.final_max.stride});
    jb["notation"] = build_branch(b, spec.classes, spec.input, spec.padding).notation();
    j["branches"].push_back(jb);
  }
  j["integrators"] = nlohmann::json::array();
  for (const auto& w : spec.integrators) {
    j["integrators"].push_back({{"index", w.index}, {"inputs", w.inputs},
                                {"notation", format_layer(IntegratorLayer{w.inputs})}});
  }
  return j;
}

BranchSpec branch_from_json(const nlohmann::json& jb, BranchSpec b) {
  b.index = jb.value("index", b.index);
  if (jb.contains("conv")) {
    const std::string conv = jb.at("conv").get<std::string>();
    if (conv != "2D-C" && conv != "DSC") throw ParseError("conv kind must be 2D-C or DSC, got '" + conv + "'", 0);
    b.conv = conv == "2D-C" ? ConvKind::Conv2D : ConvKind::Dsc;
  }
  if (jb.contains("shape")) b.shape = parse_frustum_shape(jb.at("shape").get<std::string>());
  b.kernel = jb.value("kernel", b.kernel);
  b.width_scale = jb.value("width_scale", b.width_scale);
  if (jb.contains("block_pool")) b.block_pool = parse_pool_stage(jb.at("block_pool").get<std::string>(), false);
  if (jb.contains("final_avg")) b.final_avg = parse_pool_stage(jb.at("final_avg").get<std::string>(), true);
  if (jb.contains("final_max")) b.final_max = parse_pool_stage(jb.at("final_max").get<std::string>(), false);
  return b;
}

EnsembleSpec ensemble_from_json(const nlohmann::json& j) {
  EnsembleSpec spec;
  spec.classes = j.at("classes").get<Index>();
  spec.input.height = j.at("input").at("height").get<Index>();
  spec.input.width = j.at("input").at("width").get<Index>();
  spec.input.channels = j.at("input").at("channels").get<Index>();
  spec.width_scale = j.at("width_scale").get<double>();
  spec.padding = parse_padding_mode(j.value("padding", "same"));
  spec.integrator_mode = parse_integrator_mode(j.value("integrator_mode", "dense"));
  for (const auto& jb : j.at("branches")) {
    const int index = jb.at("index").get<int>();
    spec.branches.push_back(branch_from_json(jb, canonical_branch(index, spec.width_scale)));
  }
  for (const auto& jw : j.at("integrators")) {
    spec.integrators.push_back({jw.at("index").get<int>(), jw.at("inputs").get<std::vector<int>>()});
  }
  return spec;
}

// ---- Ensemble ------------------------------------------------------------------

template <typename Scalar>
Ensemble<Scalar>::Ensemble(EnsembleSpec spec) : spec_(std::move(spec)) {
  if (spec_.branches.size() != static_cast<std::size_t>(kBranchCount)) {
    throw ShapeError("ensemble needs 12 branches, got " + std::to_string(spec_.branches.size()));
  }
  for (std::size_t b = 0; b < spec_.branches.size(); ++b) {
    if (spec_.branches[b].index != static_cast<int>(b) + 1) throw ShapeError("branches must be listed as N1..N12 in order");
    plans_.push_back(build_branch(spec_.branches[b], spec_.classes, spec_.input, spec_.padding));
  }
  int expected = kBranchCount + 1;
  for (const auto& w : spec_.integrators) {
    if (w.index != expected++) throw ShapeError("integrators must be listed as N13..N17 in order");
    for (int in : w.inputs) {
      if (in < 1 || in >= w.index) {
        throw ShapeError(net(w.index) + " cannot consume " + net(in) + " (inputs must precede the integrator)");
      }
    }
  }
  if (expected != kNetworkCount + 1) throw ShapeError("ensemble needs integrators N13..N17");
}

template <typename Scalar>
ParameterStore<Scalar> Ensemble<Scalar>::init_parameters(Rng& rng) const {
  ParameterStore<Scalar> store;
  for (const auto& plan : plans_) {
    for (const auto& [name, shape] : plan.parameter_shapes) {
      if (name.ends_with(".bn.gamma")) {
        store.add(name, Tensor<Scalar>(shape, Scalar(1)));
      } else if (name.ends_with(".bn.beta")) {
        store.add(name, Tensor<Scalar>(shape, Scalar(0)));
        auto& stats = store.stats(name.substr(0, name.size() - 5));
        stats.mean = Tensor<Scalar>(shape, Scalar(0));
        stats.var = Tensor<Scalar>(shape, Scalar(1));
      } else {
        Index fan_in = 1;
        for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
        store.add(name, he_uniform<Scalar>(shape, fan_in, rng));
      }
    }
  }
  for (const auto& w : spec_.integrators) {
    auto weights = init_integrator<Scalar>(spec_.integrator_mode, static_cast<Index>(w.inputs.size()), spec_.classes, rng);
    store.add(net(w.index) + ".integrator.weight", std::move(weights.weights));
  }
  return store;
}

template <typename Scalar>
Var<Scalar> Ensemble<Scalar>::branch_forward(const BranchPlan& plan, Tape<Scalar>& tape,
                                             const ParameterStore<Scalar>& params, Var<Scalar> x, bool training,
                                             std::map<std::string, RunningStats<Scalar>>* running) const {
  auto param = [&](const std::string& name) { return tape.parameter(name, params.get(name)); };
  const Index conv_pad = plan.padding == PaddingMode::Same ? (plan.spec.kernel - 1) / 2 : 0;
  for (const auto& stage : plan.stages) {
    const auto& layer = stage.layer;
    if (std::holds_alternative<Conv2DLayer>(layer)) {
      x = conv2d(x, param(stage.name + ".weight"), ConvOptions{1, conv_pad});
    } else if (std::holds_alternative<DscLayer>(layer)) {
      x = depthwise_conv2d(x, param(stage.name + ".depthwise"), ConvOptions{1, conv_pad});
      x = pointwise_conv(x, param(stage.name + ".pointwise"));
    } else if (std::holds_alternative<BatchNormLayer>(layer)) {
      BatchNormOptions opt;
      opt.training = training;
      RunningStats<Scalar>* stats = nullptr;
      if (training) {
        opt.update_running = running != nullptr;
        if (running) stats = &(*running)[stage.name];
      } else {
        auto it = params.all_stats().find(stage.name);
        if (it == params.all_stats().end()) throw ShapeError("missing running statistics for " + stage.name);
        // Inference mode only reads the statistics.
        stats = const_cast<RunningStats<Scalar>*>(&it->second);
      }
      x = batchnorm(x, param(stage.name + ".gamma"), param(stage.name + ".beta"), stats, opt);
    } else if (const auto* p = std::get_if<MaxPoolLayer>(&layer)) {
      x = max_pool2d(x, pool_options(x.shape()[2], x.shape()[3], p->window, p->stride, plan.padding));
    } else if (const auto* p = std::get_if<AvgPoolLayer>(&layer)) {
      x = avg_pool2d(x, pool_options(x.shape()[2], x.shape()[3], p->window, p->stride, plan.padding));
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      x = relu(x);
    } else if (std::holds_alternative<DcnLayer>(layer)) {
      x = dcn_apply(x, param(stage.name + ".weight"));
    } else if (std::holds_alternative<SoftmaxLayer>(layer)) {
      x = softmax(x);
    } else {
      throw ShapeError("stage " + stage.name + " has no branch implementation");
    }
  }
  return x;
}

template <typename Scalar>
HeadOutputs<Scalar> Ensemble<Scalar>::forward(Tape<Scalar>& tape, const ParameterStore<Scalar>& params, Var<Scalar> x,
                                              bool training,
                                              std::map<std::string, RunningStats<Scalar>>* running) const {
  const Shape& s = x.shape();
  const Shape expected{spec_.input.channels, spec_.input.height, spec_.input.width};
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != expected) {
    throw ShapeError("forward: batch " + shape_string(s) + " does not match input [N," + std::to_string(expected[0]) +
                     "," + std::to_string(expected[1]) + "," + std::to_string(expected[2]) + "]");
  }
  HeadOutputs<Scalar> out;
  for (std::size_t b = 0; b < plans_.size(); ++b) out[b] = branch_forward(plans_[b], tape, params, x, training, running);
  for (const auto& w : spec_.integrators) {
    std::vector<Var<Scalar>> inputs;
    for (int in : w.inputs) inputs.push_back(out[static_cast<std::size_t>(in - 1)]);
    const std::string name = net(w.index) + ".integrator.weight";
    out[static_cast<std::size_t>(w.index - 1)] =
        softlog_softmax_integrator(inputs, tape.parameter(name, params.get(name)), spec_.integrator_mode);
  }
  return out;
}

template <typename Scalar>
std::array<Tensor<Scalar>, kNetworkCount> Ensemble<Scalar>::predict(const ParameterStore<Scalar>& params,
                                                                    const Tensor<Scalar>& batch) const {
  Tape<Scalar> tape(false);
  auto heads = forward(tape, params, tape.constant(batch, "input"), false);
  std::array<Tensor<Scalar>, kNetworkCount> out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = heads[i].value();
  return out;
}

template <typename Scalar>
Index Ensemble<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& plan : plans_) n += plan.parameter_count();
  for (const auto& w : spec_.integrators) {
    n += shape_size(IntegratorWeights<Scalar>::expected_shape(spec_.integrator_mode, static_cast<Index>(w.inputs.size()),
                                                              spec_.classes));
  }
  return n;
}

template class Ensemble<float>;
template class Ensemble<double>;

}  // namespace dragonfly
