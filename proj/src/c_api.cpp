#include "dfq/dfq.h"

#include <cmath>
#include <limits>
#include <new>
#include <sstream>
#include <string>

#include "dfq/dataset.hpp"
#include "dfq/error.hpp"
#include "dfq/eval.hpp"
#include "dfq/io.hpp"
#include "dfq/model_io.hpp"
#include "dfq/quant.hpp"
#include "dfq/synth.hpp"
#include "dfq/train.hpp"

struct dfq_model {
  dfq::SegModel m;
};
struct dfq_quantized {
  dfq::QuantizedModel q;
  std::string description;
};
struct dfq_dataset {
  dfq::Dataset d;
};
struct dfq_image {
  dfq::Tensor t;
};
struct dfq_synthesis {
  dfq::SynthesisResult r;
};
struct dfq_report {
  dfq::EvalReport r;
  std::string precision;
};
struct dfq_table {
  std::vector<dfq::CompareRow> rows;
};

namespace {

thread_local std::string g_last_error;

dfq_status fail(dfq_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

// Runs fn, translating exceptions into status codes and the thread's error
// message.
template <class Fn>
dfq_status guarded(Fn&& fn) {
  try {
    fn();
    return DFQ_OK;
  } catch (const dfq::Error& e) {
    return fail(static_cast<dfq_status>(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(DFQ_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(DFQ_ERR_INTERNAL, e.what());
  }
}

template <class T>
void require(const T* p, const char* what) {
  if (p == nullptr) throw dfq::InvalidArgument(std::string(what) + " must not be NULL");
}

template <class T>
void clear(T** out) {
  if (out) *out = nullptr;
}

dfq::ModelConfig to_cpp(const dfq_model_config& c) {
  dfq::ModelConfig m;
  m.image_size = c.image_size;
  m.patch_size = c.patch_size;
  m.embed_dim = c.embed_dim;
  m.num_layers = c.num_layers;
  m.num_heads = c.num_heads;
  m.mlp_ratio = c.mlp_ratio;
  m.num_classes = c.num_classes;
  m.channels = c.channels;
  return m;
}

dfq_model_config to_c(const dfq::ModelConfig& m) {
  return {m.image_size, m.patch_size, m.embed_dim, m.num_layers,
          m.num_heads,  m.mlp_ratio,  m.num_classes, m.channels};
}

dfq::SynthesisConfig to_cpp(const dfq_synth_config& c) {
  dfq::SynthesisConfig s;
  s.alpha = c.alpha;
  s.beta = c.beta;
  s.eps1 = c.eps1;
  s.eps2 = c.eps2;
  s.total_iters = c.total_iters;
  s.evolve_iters = c.evolve_iters;
  s.lr = c.lr;
  s.lr_min = c.lr_min;
  s.adam_beta1 = c.adam_beta1;
  s.adam_beta2 = c.adam_beta2;
  s.seed = c.seed;
  switch (c.entropy_sign) {
    case DFQ_ENTROPY_MAXIMIZE: s.entropy_sign = dfq::EntropySign::kMaximize; break;
    case DFQ_ENTROPY_MINIMIZE: s.entropy_sign = dfq::EntropySign::kMinimize; break;
    default: throw dfq::InvalidArgument("unknown entropy sign");
  }
  switch (c.estimator) {
    case DFQ_ESTIMATOR_RESUBSTITUTION: s.kde.estimator = dfq::EntropyEstimator::kResubstitution; break;
    case DFQ_ESTIMATOR_LEAVE_ONE_OUT: s.kde.estimator = dfq::EntropyEstimator::kLeaveOneOut; break;
    default: throw dfq::InvalidArgument("unknown entropy estimator");
  }
  return s;
}

dfq::CalibSource to_cpp(dfq_calib_source s) {
  switch (s) {
    case DFQ_SOURCE_NONE: return dfq::CalibSource::kNone;
    case DFQ_SOURCE_SYNTHESIZED: return dfq::CalibSource::kSynthesized;
    case DFQ_SOURCE_GAUSSIAN: return dfq::CalibSource::kGaussian;
    case DFQ_SOURCE_REAL: return dfq::CalibSource::kReal;
  }
  throw dfq::InvalidArgument("unknown calibration source");
}

dfq_report* make_report(dfq::EvalReport r) {
  auto* out = new dfq_report{std::move(r), {}};
  out->precision = out->r.precision();
  return out;
}

}  // namespace

extern "C" {

const char* dfq_last_error(void) { return g_last_error.c_str(); }

const char* dfq_status_name(dfq_status status) {
  switch (status) {
    case DFQ_OK: return "ok";
    case DFQ_ERR_INVALID_ARGUMENT: return "invalid argument";
    case DFQ_ERR_SHAPE: return "shape error";
    case DFQ_ERR_FORMAT: return "format error";
    case DFQ_ERR_IO: return "i/o error";
    case DFQ_ERR_NUMERIC: return "numeric error";
    case DFQ_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* dfq_version(void) { return "1.0.0"; }

size_t dfq_drain_warnings(void (*cb)(const char*, void*), void* user) {
  const auto w = dfq::take_warnings();
  if (cb)
    for (const auto& m : w) cb(m.c_str(), user);
  return w.size();
}

// ---- model ------------------------------------------------------------------

void dfq_model_config_default(dfq_model_config* config) {
  if (config) *config = to_c(dfq::ModelConfig{});
}

dfq_status dfq_model_config_validate(const dfq_model_config* config) {
  return guarded([&] {
    require(config, "config");
    to_cpp(*config).validate();
  });
}

dfq_status dfq_model_create(const dfq_model_config* config, uint64_t seed, dfq_model** out) {
  clear(out);
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    *out = new dfq_model{dfq::init_model(to_cpp(*config), seed)};
  });
}

dfq_status dfq_model_load(const char* path, dfq_model** out) {
  clear(out);
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new dfq_model{dfq::load_model(path)};
  });
}

dfq_status dfq_model_save(const dfq_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    dfq::save_model(model->m, path);
  });
}

void dfq_model_get_config(const dfq_model* model, dfq_model_config* config) {
  if (model && config) *config = to_c(model->m.config);
}

size_t dfq_model_parameter_count(const dfq_model* model) { return model ? model->m.parameter_count() : 0; }

void dfq_model_free(dfq_model* model) { delete model; }

// ---- dataset ----------------------------------------------------------------

dfq_status dfq_dataset_generate(uint64_t seed, size_t count, const dfq_model_config* config, dfq_dataset** out) {
  clear(out);
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    const auto c = to_cpp(*config);
    c.validate();
    if (count == 0) throw dfq::InvalidArgument("dataset size must be at least 1");
    *out = new dfq_dataset{dfq::generate_dataset(seed, count, c)};
  });
}

size_t dfq_dataset_size(const dfq_dataset* data) { return data ? data->d.size() : 0; }

dfq_status dfq_dataset_image(const dfq_dataset* data, size_t i, dfq_image** out) {
  clear(out);
  return guarded([&] {
    require(data, "data");
    require(out, "out");
    if (i >= data->d.size()) throw dfq::InvalidArgument("dataset index out of range");
    *out = new dfq_image{data->d[i].image.clone()};
  });
}

void dfq_dataset_free(dfq_dataset* data) { delete data; }

// ---- training ---------------------------------------------------------------

void dfq_train_options_default(dfq_train_options* options) {
  if (!options) return;
  const dfq::TrainOptions d;
  *options = {d.epochs, d.lr, d.batch_size, d.seed};
}

dfq_status dfq_train(const dfq_model* model, const dfq_dataset* data, const dfq_train_options* options,
                     dfq_model** out, double* final_loss) {
  clear(out);
  return guarded([&] {
    require(model, "model");
    require(data, "data");
    require(options, "options");
    require(out, "out");
    dfq::TrainOptions o;
    o.epochs = options->epochs;
    o.lr = options->lr;
    o.batch_size = options->batch_size;
    o.seed = options->seed;
    auto res = dfq::train(model->m, data->d, o);
    if (final_loss)
      *final_loss = res.epoch_loss.empty() ? std::numeric_limits<double>::quiet_NaN() : res.epoch_loss.back();
    *out = new dfq_model{std::move(res.model)};
  });
}

// ---- images -----------------------------------------------------------------

dfq_status dfq_image_create(uint32_t h, uint32_t w, uint32_t channels, const double* data, dfq_image** out) {
  clear(out);
  return guarded([&] {
    require(data, "data");
    require(out, "out");
    if (h == 0 || w == 0 || channels == 0) throw dfq::InvalidArgument("image dimensions must be positive");
    const std::size_t n = std::size_t{h} * w * channels;
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(data[i])) throw dfq::NumericError("image contains a non-finite value");
    *out = new dfq_image{dfq::Tensor({h, w, channels}, std::vector<double>(data, data + n))};
  });
}

dfq_status dfq_image_gaussian(uint64_t seed, const dfq_model_config* config, dfq_image** out) {
  clear(out);
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    *out = new dfq_image{dfq::init_image(seed, to_cpp(*config)).detach()};
  });
}

void dfq_image_shape(const dfq_image* image, uint32_t* h, uint32_t* w, uint32_t* channels) {
  if (!image) return;
  if (h) *h = static_cast<uint32_t>(image->t.dim(0));
  if (w) *w = static_cast<uint32_t>(image->t.dim(1));
  if (channels) *channels = static_cast<uint32_t>(image->t.dim(2));
}

const double* dfq_image_data(const dfq_image* image) { return image ? image->t.data().data() : nullptr; }

dfq_status dfq_image_save(const dfq_image* image, const char* path) {
  return guarded([&] {
    require(image, "image");
    require(path, "path");
    dfq::save_image(image->t, path);
  });
}

dfq_status dfq_image_load(const char* path, dfq_image** out) {
  clear(out);
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new dfq_image{dfq::load_image(path)};
  });
}

dfq_status dfq_image_write_pnm(const dfq_image* image, const char* path) {
  return guarded([&] {
    require(image, "image");
    require(path, "path");
    dfq::write_pnm(image->t, path);
  });
}

void dfq_image_free(dfq_image* image) { delete image; }

// ---- synthesis --------------------------------------------------------------

void dfq_synth_config_default(dfq_synth_config* config) {
  if (!config) return;
  const dfq::SynthesisConfig d;
  *config = {d.alpha,      d.beta,       d.eps1, d.eps2, d.total_iters, d.evolve_iters, d.lr, d.lr_min,
             d.adam_beta1, d.adam_beta2, d.seed, DFQ_ENTROPY_MAXIMIZE, DFQ_ESTIMATOR_RESUBSTITUTION};
}

dfq_status dfq_synthesize(const dfq_model* model, const dfq_synth_config* config, dfq_synthesis** out,
                          dfq_image** last_good) {
  clear(out);
  clear(last_good);
  try {
    require(model, "model");
    require(config, "config");
    require(out, "out");
    *out = new dfq_synthesis{dfq::synthesize(model->m, to_cpp(*config))};
    return DFQ_OK;
  } catch (const dfq::SynthesisError& e) {
    if (last_good) *last_good = new dfq_image{e.last_good_image().detach()};
    return fail(DFQ_ERR_NUMERIC, e.what());
  } catch (...) {
    return guarded([] { throw; });
  }
}

dfq_status dfq_synthesis_image(const dfq_synthesis* s, dfq_image** out) {
  clear(out);
  return guarded([&] {
    require(s, "synthesis");
    require(out, "out");
    *out = new dfq_image{s->r.image.clone()};
  });
}

size_t dfq_synthesis_num_masks(const dfq_synthesis* s) { return s ? s->r.labels.masks.size() : 0; }

dfq_status dfq_synthesis_mask(const dfq_synthesis* s, size_t i, int* category, size_t* size, double* peak,
                              long* birth) {
  return guarded([&] {
    require(s, "synthesis");
    if (i >= s->r.labels.masks.size()) throw dfq::InvalidArgument("mask index out of range");
    const auto& m = s->r.labels.masks[i];
    if (category) *category = m.category;
    if (size) *size = m.size();
    if (peak) *peak = m.peak;
    if (birth) *birth = m.birth;
  });
}

size_t dfq_synthesis_rejected(const dfq_synthesis* s) { return s ? s->r.rejected : 0; }

dfq_status dfq_synthesis_write_trace(const dfq_synthesis* s, const char* path) {
  return guarded([&] {
    require(s, "synthesis");
    require(path, "path");
    dfq::write_text(path, dfq::trace_csv(s->r.trace));
  });
}

dfq_status dfq_synthesis_write_overlay(const dfq_synthesis* s, const char* path) {
  return guarded([&] {
    require(s, "synthesis");
    require(path, "path");
    dfq::write_label_overlay(s->r.image, s->r.labels.label_map(), path);
  });
}

void dfq_synthesis_free(dfq_synthesis* s) { delete s; }

// ---- quantization -----------------------------------------------------------

dfq_status dfq_quantize(const dfq_model* model, const dfq_image* const* calib, size_t count, int w_bits,
                        int a_bits, dfq_norm_mode mode, dfq_quantized** out) {
  clear(out);
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    if (count > 0) require(calib, "calib");
    std::vector<dfq::Tensor> images;
    for (size_t i = 0; i < count; ++i) {
      require(calib[i], "calibration image");
      images.push_back(calib[i]->t);
    }
    dfq::QuantizeOptions o;
    switch (mode) {
      case DFQ_NORM_REPARAMETERIZED: o.norm_mode = dfq::NormActMode::kReparameterized; break;
      case DFQ_NORM_PER_LAYER: o.norm_mode = dfq::NormActMode::kPerLayer; break;
      case DFQ_NORM_PER_CHANNEL: o.norm_mode = dfq::NormActMode::kPerChannel; break;
      default: throw dfq::InvalidArgument("unknown norm mode");
    }
    auto q = dfq::quantize_model(model->m, images, w_bits, a_bits, o);
    auto* h = new dfq_quantized{std::move(q), {}};
    h->description = h->q.describe();
    *out = h;
  });
}

const char* dfq_quantized_describe(const dfq_quantized* q) { return q ? q->description.c_str() : ""; }

void dfq_quantized_get_config(const dfq_quantized* q, dfq_model_config* config) {
  if (q && config) *config = to_c(q->q.reparameterized.config);
}

void dfq_quantized_bits(const dfq_quantized* q, int* w_bits, int* a_bits) {
  if (!q) return;
  if (w_bits) *w_bits = q->q.w_bits;
  if (a_bits) *a_bits = q->q.a_bits;
}

dfq_status dfq_quantized_save(const dfq_quantized* q, const char* path) {
  return guarded([&] {
    require(q, "quantized model");
    require(path, "path");
    dfq::save_quantized(q->q, path);
  });
}

dfq_status dfq_quantized_load(const char* path, dfq_quantized** out) {
  clear(out);
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto* h = new dfq_quantized{dfq::load_quantized(path), {}};
    h->description = h->q.describe();
    *out = h;
  });
}

void dfq_quantized_free(dfq_quantized* q) { delete q; }

// ---- evaluation -------------------------------------------------------------

dfq_status dfq_evaluate_model(const dfq_model* model, const dfq_dataset* data, dfq_report** out) {
  clear(out);
  return guarded([&] {
    require(model, "model");
    require(data, "data");
    require(out, "out");
    *out = make_report(dfq::evaluate(model->m, data->d));
  });
}

dfq_status dfq_evaluate_quantized(const dfq_quantized* q, const dfq_dataset* data, dfq_report** out) {
  clear(out);
  return guarded([&] {
    require(q, "quantized model");
    require(data, "data");
    require(out, "out");
    *out = make_report(dfq::evaluate(q->q, data->d));
  });
}

void dfq_report_set_origin(dfq_report* r, dfq_calib_source source, uint64_t seed) {
  if (!r) return;
  try {
    r->r.source = to_cpp(source);
  } catch (const dfq::Error&) {
    r->r.source = dfq::CalibSource::kNone;
  }
  r->r.seed = seed;
}

double dfq_report_mean_iou(const dfq_report* r) { return r ? r->r.mean_iou : 0.0; }
size_t dfq_report_num_masks(const dfq_report* r) { return r ? r->r.ious.size() : 0; }
const char* dfq_report_precision(const dfq_report* r) { return r ? r->precision.c_str() : ""; }
uint64_t dfq_report_size_bytes(const dfq_report* r) { return r ? r->r.size_bytes : 0; }
uint64_t dfq_report_bops(const dfq_report* r) { return r ? r->r.bops : 0; }

dfq_status dfq_report_write_csv(const dfq_report* r, const char* dataset_name, const char* path) {
  return guarded([&] {
    require(r, "report");
    require(dataset_name, "dataset_name");
    require(path, "path");
    dfq::write_text(path, dfq::eval_csv(r->r, dataset_name));
  });
}

dfq_status dfq_report_write_masks_csv(const dfq_report* r, const char* path) {
  return guarded([&] {
    require(r, "report");
    require(path, "path");
    std::ostringstream s;
    s << "image,class,iou\n";
    for (std::size_t i = 0; i < r->r.ious.size(); ++i)
      s << r->r.mask_image[i] << ',' << r->r.mask_class[i] << ',' << dfq::format_double(r->r.ious[i]) << '\n';
    dfq::write_text(path, s.str());
  });
}

void dfq_report_free(dfq_report* r) { delete r; }

dfq_status dfq_model_size_bytes(const dfq_model_config* config, int w_bits, uint64_t* out) {
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    *out = dfq::model_size_bytes(to_cpp(*config), w_bits);
  });
}

dfq_status dfq_bops(const dfq_model_config* config, int w_bits, int a_bits, uint64_t* out) {
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    *out = dfq::bops(to_cpp(*config), w_bits, a_bits);
  });
}

dfq_status dfq_compare(const dfq_model* model, const dfq_dataset* data, const dfq_calib_set* sets,
                       size_t num_sets, const int* bits, size_t num_bits, const char* dataset_name,
                       uint64_t seed, dfq_table** out) {
  clear(out);
  return guarded([&] {
    require(model, "model");
    require(data, "data");
    require(out, "out");
    if (num_sets > 0) require(sets, "sets");
    if (num_bits > 0) require(bits, "bits");
    std::vector<dfq::CalibSet> calib;
    for (size_t i = 0; i < num_sets; ++i) {
      dfq::CalibSet c{to_cpp(sets[i].source), {}};
      if (sets[i].count > 0) require(sets[i].images, "calibration images");
      for (size_t k = 0; k < sets[i].count; ++k) {
        require(sets[i].images[k], "calibration image");
        c.images.push_back(sets[i].images[k]->t);
      }
      calib.push_back(std::move(c));
    }
    dfq::CompareOptions o;
    o.bits.assign(bits, bits + num_bits);
    if (dataset_name) o.dataset_name = dataset_name;
    o.seed = seed;
    *out = new dfq_table{dfq::compare(model->m, data->d, calib, o)};
  });
}

size_t dfq_table_rows(const dfq_table* t) { return t ? t->rows.size() : 0; }

dfq_status dfq_table_row(const dfq_table* t, size_t i, dfq_calib_source* source, int* w_bits, int* a_bits,
                         double* mean_iou) {
  return guarded([&] {
    require(t, "table");
    if (i >= t->rows.size()) throw dfq::InvalidArgument("row index out of range");
    const auto& r = t->rows[i];
    if (source) *source = static_cast<dfq_calib_source>(r.source);
    if (w_bits) *w_bits = r.w_bits;
    if (a_bits) *a_bits = r.a_bits;
    if (mean_iou) *mean_iou = r.mean_iou;
  });
}

dfq_status dfq_table_write_csv(const dfq_table* t, const char* path) {
  return guarded([&] {
    require(t, "table");
    require(path, "path");
    dfq::write_text(path, dfq::compare_csv(t->rows));
  });
}

void dfq_table_free(dfq_table* t) { delete t; }

}  // extern "C"
