#include "bevfuse/model.hpp"

#include <algorithm>
#include <numeric>

#include "bevfuse/common.hpp"
#include "bevfuse/rng.hpp"

namespace bevfuse::model {

void ModelConfig::validate() const {
  camera.validate();
  grid.validate();
  depth_bins.validate();
  schema.validate();
  image_encoder.validate();
  if (classes.empty()) throw ConfigError("model needs at least one class");
  const int stride = image_encoder.total_stride();
  if (camera.height % stride != 0 || camera.width % stride != 0)
    throw ConfigError("image size must be divisible by the encoder stride");
  // the radar backbone halves the pillar grid, the bev backbone halves it again
  if (grid.nx() % 4 != 0 || grid.ny() % 4 != 0)
    throw ConfigError("pillar grid size must be divisible by 4");
  if (context_channels < 1 || depth_hidden < 1 || pfn_channels < 1 || head_hidden < 1 ||
      unified_channels < 1 || fused_channels < 1)
    throw ConfigError("channel widths must be positive");
  if (pillar_max_points < 1 || pillar_max_pillars < 1)
    throw ConfigError("pillar caps must be positive");
}

Model::Model(const ModelConfig& config) : cfg(config) {
  cfg.validate();
  cfg.radar_bev.in_channels = cfg.pfn_channels;
  cfg.bev_encoder.in_channels = cfg.fused_channels;

  head_grid = cfg.grid.coarser(2);
  anchors.grid = head_grid;
  anchors.classes = cfg.classes;
  anchors.validate();

  const int stride = cfg.image_encoder.total_stride();
  feat_h = cfg.camera.height / stride;
  feat_w = cfg.camera.width / stride;

  Rng rng(derive_seed(cfg.seed, "init"));
  image_encoder = camera::ImageEncoder(cfg.image_encoder, rng);
  depth_transform = camera::RadarDepthTransform(cfg.schema, cfg.depth_bins, rng);
  depth_context = camera::DepthContextHead(
      cfg.image_encoder.widths.back(), camera::RadarDepthTransform::kDepthFeatureChannels,
      cfg.context_channels, cfg.depth_bins.num_bins, cfg.depth_hidden, rng);
  pfn = radar::PillarFeatureNet(8 + cfg.schema.num_extras(), cfg.pfn_channels, rng);
  radar_encoder = radar::RadarBevEncoder(cfg.radar_bev, rng);

  fusion::UFFConfig uffc;
  uffc.modality_channels = {cfg.context_channels, cfg.radar_bev.out_channels};
  uffc.unified_channels = cfg.unified_channels;
  uffc.fused_channels = cfg.fused_channels;
  uff = fusion::UFF(uffc, rng);

  bev_encoder = detect::BevEncoder(cfg.bev_encoder, rng);
  detect::DetectionHeadConfig head_cfg;
  head_cfg.in_channels = cfg.bev_encoder.out_channels;
  head_cfg.hidden = cfg.head_hidden;
  head = detect::DetectionHead(head_cfg, anchors.anchors_per_cell(), rng);

  const auto frustum = geometry::build_frustum(feat_h, feat_w, cfg.depth_bins, cfg.camera, stride);
  lift_cells_ = geometry::bev_cell_of_points(frustum, head_grid);

  collect_params(params, "model");
}

ForwardResult Model::forward(const ad::Tensor& image, const radar::RadarPointCloud& cloud,
                             std::uint64_t frame_key) const {
  if (image.dim(1) != cfg.camera.height || image.dim(2) != cfg.camera.width)
    throw ConfigError("image size does not match the camera model");
  ForwardResult out;

  ad::Tensor img_feat = image_encoder.forward(image);
  out.depth_map = camera::build_radar_depth_map(cloud, cfg.camera, feat_h, feat_w,
                                                cfg.image_encoder.total_stride());
  if (cfg.ablate_rdl) {
    out.depth_map.channels = ad::Tensor(out.depth_map.channels.shape(), false);
    std::fill(out.depth_map.mask.begin(), out.depth_map.mask.end(), std::uint8_t{0});
  }
  ad::Tensor rdl_feat = depth_transform.forward(out.depth_map);
  out.depth_logits = depth_context.depth_logits(img_feat, rdl_feat);
  ad::Tensor depth_dist = ad::softmax_dim0(out.depth_logits);
  ad::Tensor context = depth_context.context_block.forward(img_feat);
  out.cam_bev = ad::lift_splat(context, depth_dist, lift_cells_, head_grid.ny(), head_grid.nx());

  auto batch = radar::pillarize(cloud, cfg.grid, cfg.pillar_max_points, cfg.pillar_max_pillars,
                                derive_seed(cfg.seed, "pillarize", {frame_key}));
  ad::Tensor pillar_feat = pfn.forward(batch);
  ad::Tensor pseudo = radar::scatter_pillars(pillar_feat, batch.coords, cfg.grid);
  out.radar_bev = radar_encoder.forward(pseudo);

  ad::Tensor fused = uff.forward({out.cam_bev, out.radar_bev});
  ad::Tensor bev = bev_encoder.forward(fused);
  out.head = head.forward(bev);
  return out;
}

detect::Losses Model::losses(const ForwardResult& fwd, const std::vector<boxes::Box3D>& gt,
                             const detect::AnchorAssignment& assignment) const {
  ad::Tensor depth_aux =
      camera::depth_supervision_loss(fwd.depth_logits, fwd.depth_map, cfg.depth_bins);
  return detect::compute_losses(fwd.head, gt, anchors, assignment, cfg.loss_weights, cfg.focal,
                                depth_aux);
}

std::vector<boxes::Box3D> Model::detections(const ForwardResult& fwd) const {
  return detect::decode_and_nms(fwd.head, anchors, cfg.decode);
}

void Model::collect_params(nn::ParamRegistry& reg, const std::string& prefix) {
  image_encoder.collect_params(reg, prefix + ".img");
  depth_transform.collect_params(reg, prefix + ".rdl");
  depth_context.collect_params(reg, prefix + ".depth");
  pfn.collect_params(reg, prefix + ".pfn");
  radar_encoder.collect_params(reg, prefix + ".radar");
  uff.collect_params(reg, prefix + ".fusion");
  bev_encoder.collect_params(reg, prefix + ".bev");
  head.collect_params(reg, prefix + ".head");
}

Sample make_sample(const synth::Frame& frame) {
  Sample s;
  s.id = frame.id;
  s.image = synth::image_tensor(frame);
  s.cloud = frame.cloud;
  s.gt = frame.gt;
  s.key = Model::frame_key(frame.id);
  return s;
}

std::vector<boxes::Box3D> detect_sample(const Model& m, const Sample& s) {
  ad::NoGradGuard guard;
  return m.detections(m.forward(s.image, s.cloud, s.key));
}

Trainer::Trainer(Model* m, double lr) : model(m), opt(&m->params, lr), base_lr(lr) {}

const detect::AnchorAssignment& Trainer::assignment_for(const Sample& s) {
  auto it = assignments_.find(s.key);
  if (it == assignments_.end())
    it = assignments_.emplace(s.key, detect::assign_anchors(model->anchors, s.gt)).first;
  return it->second;
}

detect::Losses Trainer::step(const Sample& s) {
  opt.zero_grad();
  auto fwd = model->forward(s.image, s.cloud, s.key);
  detect::Losses L = model->losses(fwd, s.gt, assignment_for(s));
  L.total.backward();
  opt.step();
  return L;
}

void Trainer::fit(const std::vector<Sample>& samples, long total_steps,
                  const std::function<void(long, const detect::Losses&)>& on_step, long start) {
  if (samples.empty()) throw ConfigError("no training samples");
  if (start < 0 || start > total_steps) throw ConfigError("bad training resume point");
  if (batch < 1) throw ConfigError("batch must be at least 1");
  const long n = static_cast<long>(samples.size());
  long consumed = start * batch;
  std::vector<int> order;
  long order_epoch = -1;
  for (long done = start; done < total_steps; ++done) {
    if (cosine_lr) {
      const long s = done + 1;
      if (s <= warmup_steps) {
        opt.lr = base_lr * static_cast<double>(s) / static_cast<double>(warmup_steps);
      } else if (total_steps > warmup_steps) {
        opt.lr = base_lr * 0.5 *
                 (1.0 + std::cos(M_PI * static_cast<double>(s - warmup_steps) /
                                 static_cast<double>(total_steps - warmup_steps)));
      }
    }
    opt.zero_grad();
    ad::Tensor total = ad::Tensor::scalar(0.0);
    double cls = 0, reg = 0, dir = 0, depth = 0;
    for (int b = 0; b < batch; ++b, ++consumed) {
      const long epoch = consumed / n;
      if (epoch != order_epoch) {
        order.resize(samples.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(model->cfg.seed, "epoch", {static_cast<std::uint64_t>(epoch)}));
        rng.shuffle(order);
        order_epoch = epoch;
      }
      const Sample& s = samples[static_cast<std::size_t>(order[static_cast<std::size_t>(consumed % n)])];
      auto fwd = model->forward(s.image, s.cloud, s.key);
      detect::Losses L = model->losses(fwd, s.gt, assignment_for(s));
      total = ad::add(total, ad::mul_scalar(L.total, 1.0 / batch));
      cls += L.cls.value() / batch;
      reg += L.reg.value() / batch;
      dir += L.dir.value() / batch;
      depth += L.depth_aux.value() / batch;
    }
    total.backward();
    opt.step();
    if (on_step) {
      detect::Losses avg;
      avg.cls = ad::Tensor::scalar(cls);
      avg.reg = ad::Tensor::scalar(reg);
      avg.dir = ad::Tensor::scalar(dir);
      avg.depth_aux = ad::Tensor::scalar(depth);
      avg.total = ad::Tensor::scalar(total.value());
      on_step(done + 1, avg);
    }
  }
}

evaluation::MapResult evaluate_model(const Model& m, const std::vector<Sample>& samples,
                                     bool use_3d_iou) {
  evaluation::EvalConfig ec;
  for (std::size_t i = 0; i < m.cfg.classes.size(); ++i)
    ec.iou_thresholds[static_cast<int>(i)] = m.cfg.classes[i].iou_eval_thr;
  std::vector<evaluation::EvalFrame> frames;
  for (const auto& s : samples) {
    evaluation::EvalFrame f;
    f.frame_id = s.id;
    f.dets = detect_sample(m, s);
    f.gts = s.gt;
    frames.push_back(std::move(f));
  }
  return evaluation::evaluate_map(frames, ec, use_3d_iou);
}

}  // namespace bevfuse::model
