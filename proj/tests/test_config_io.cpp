#include <gtest/gtest.h>
#include <png.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <filesystem>
#include <sstream>

#include "vdet/config.hpp"
#include "vdet/model_io.hpp"
#include "vdet/overlay.hpp"

using namespace vdet;
namespace fs = std::filesystem;

namespace {

struct Toy {
  std::vector<Image> images;
  std::vector<std::vector<GroundTruth>> gts;
};

Toy toy_scenes(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Toy t;
  for (std::size_t i = 0; i < n; ++i) {
    SynthScene s = synth_scene(rng, SynthConfig{});
    t.images.push_back(std::move(s.image));
    t.gts.push_back(std::move(s.gts));
  }
  return t;
}

RunConfig quick_config() {
  RunConfig c;
  c.rcnn.pretrain_epochs = 1;
  c.rcnn.finetune_epochs = 1;
  c.rcnn.batches_per_epoch = 2;
  c.rcnn.proposals.max_proposals = 100;
  c.frcnn.step1_epochs = c.frcnn.step2_epochs = c.frcnn.step3_epochs = c.frcnn.step4_epochs = 1;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vdet_config_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Rewrites the trailing checksum so that edits in the body are not caught by it.
void reseal(std::vector<std::uint8_t>& bytes) {
  const std::uint32_t crc = crc32_of(bytes.data(), bytes.size() - 4);
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + i] = static_cast<std::uint8_t>(crc >> (8 * i));
}

bool same_detections(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].class_id != b[i].class_id || a[i].score != b[i].score || a[i].box.x != b[i].box.x ||
        a[i].box.y != b[i].box.y || a[i].box.w != b[i].box.w || a[i].box.h != b[i].box.h) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(Config, DefaultDumpRoundTrips) {
  const RunConfig c;
  const std::string text = dump_config(c);
  EXPECT_EQ(dump_config(parse_config(text)), text);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(config_key_names().size()));
}

TEST(Config, EditedValuesRoundTrip) {
  RunConfig c;
  set_config_value(c, "rpn.lambda", "0.1");
  set_config_value(c, "ridge.lambda", "1e-3");
  set_config_value(c, "proposals.merge_threshold", "0.35");
  set_config_value(c, "det.delta_std", "0.2, 0.2, 0.3, 0.3");
  set_config_value(c, "rpn.eq2_multiplier", "prediction");
  set_config_value(c, "eval.ap_mode", "eleven_point");
  set_config_value(c, "proposals.mode", "sliding");
  set_config_value(c, "split.seed", "18446744073709551615");
  set_config_value(c, "frcnn.learning_rate", "0.0030000000000000001");
  const RunConfig back = parse_config(dump_config(c));
  EXPECT_EQ(dump_config(back), dump_config(c));
  EXPECT_EQ(back.frcnn.rpn.lambda, 0.1);
  EXPECT_EQ(back.rcnn.ridge_lambda, 1e-3);
  EXPECT_EQ(back.rcnn.proposals.merge_threshold, 0.35);
  EXPECT_EQ(back.frcnn.det.delta_std[3], 0.3);
  EXPECT_EQ(back.frcnn.rpn.eq2_multiplier, Eq2Multiplier::kPrediction);
  EXPECT_EQ(back.eval.ap_mode, ApMode::kElevenPoint);
  EXPECT_EQ(back.split.seed, 18446744073709551615ull);
  EXPECT_EQ(back.frcnn.learning_rate, 0.003);
}

TEST(Config, SharedNetworkKeysReachBothDetectors) {
  RunConfig c;
  set_config_value(c, "net.conv_channels", "16");
  set_config_value(c, "warp.output_size", "24");
  EXPECT_EQ(c.rcnn.net.conv_channels, 16);
  EXPECT_EQ(c.frcnn.net.conv_channels, 16);
  EXPECT_EQ(c.rcnn.net.input_size, 24);
  EXPECT_EQ(c.rcnn.warp.output_size, 24);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, CommentsAndBlankLines) {
  const RunConfig c = parse_config("# comment\n\n  rpn.pos_iou =  0.65  \n\t# indented comment\nsvm.lambda=0.01\n");
  EXPECT_EQ(c.frcnn.rpn.pos_iou, 0.65);
  EXPECT_EQ(c.rcnn.svm.lambda, 0.01);
}

TEST(Config, UnknownKeyRejectedWithLineNumber) {
  try {
    parse_config("rpn.lambda = 10\nrpn.lamda = 3\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("line 2"), std::string::npos) << m;
    EXPECT_NE(m.find("rpn.lamda"), std::string::npos) << m;
  }
  RunConfig c;
  EXPECT_THROW(set_config_value(c, "nope", "1"), ConfigError);
  EXPECT_THROW(get_config_value(c, "nope"), ConfigError);
}

TEST(Config, MalformedValuesRejected) {
  RunConfig c;
  EXPECT_THROW(set_config_value(c, "rpn.lambda", "ten"), ConfigError);
  EXPECT_THROW(set_config_value(c, "rpn.lambda", "1.5x"), ConfigError);
  EXPECT_THROW(set_config_value(c, "rpn.window", "3.5"), ConfigError);
  EXPECT_THROW(set_config_value(c, "rpn.eq2_multiplier", "both"), ConfigError);
  EXPECT_THROW(set_config_value(c, "det.delta_std", "0.1,0.1,0.2"), ConfigError);
  EXPECT_THROW(parse_config("rpn.lambda\n"), ConfigError);
}

TEST(Config, ValuesValidatedAtLoad) {
  EXPECT_THROW(parse_config("rpn.pos_iou = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("split.train_fraction = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("frcnn.learning_rate = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("rpn.anchor_scales = \n"), ConfigError);
  EXPECT_THROW(parse_config("rcnn.finetune_positives = 200\n"), ConfigError);
}

TEST(Config, LoadFromFile) {
  const fs::path dir = scratch("load");
  write_file_bytes(dir / "c.cfg", {'r', 'p', 'n', '.', 'w', 'i', 'n', 'd', 'o', 'w', '=', '5', '\n'});
  EXPECT_EQ(load_config(dir / "c.cfg").frcnn.rpn.window, 5);
  EXPECT_THROW(load_config(dir / "missing.cfg"), IoError);
}

TEST(Serialize, LittleEndianPrimitives) {
  ByteWriter w;
  w.u32(0x01020304);
  w.f32(1.0f);
  w.str("ab");
  const std::vector<std::uint8_t> want{4, 3, 2, 1, 0, 0, 0x80, 0x3f, 2, 0, 0, 0, 'a', 'b'};
  EXPECT_EQ(w.bytes(), want);
  ByteReader r(want.data(), want.size());
  EXPECT_EQ(r.u32(), 0x01020304u);
  EXPECT_EQ(r.f32(), 1.0f);
  EXPECT_EQ(r.str(), "ab");
  EXPECT_TRUE(r.done());
  EXPECT_THROW(r.u8(), FormatError);
}

TEST(Serialize, Crc32KnownValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32_of(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), 0xCBF43926u);
}

TEST(Serialize, BlocksRoundTrip) {
  Rng rng(3);
  const NetSpec spec;
  ModelFile f{"x", "a = 1\n", {}, {}};
  f.sequentials.emplace_back("backbone", make_backbone<float>(spec, rng));
  f.sequentials.emplace_back("head", make_linear_head<float>(spec.fc_dim, 3, rng));
  Eigen::MatrixXd m(3, 2);
  m << 1, -2.5, 1e-300, 3, std::numeric_limits<double>::max(), -0.0;
  f.matrices.emplace_back("m", m);
  const auto bytes = encode_model_file(f);
  const ModelFile g = decode_model_file(bytes);
  EXPECT_EQ(g.method, "x");
  EXPECT_EQ(g.config_text, "a = 1\n");
  EXPECT_EQ(encode_model_file(g), bytes);
  EXPECT_EQ(g.matrix("m"), m);
  const Tensor<float> x({2, 3, 32, 32}, 0.25f);
  const Tensor<float> ya = g.sequential("backbone").infer(x), yb = f.sequential("backbone").infer(x);
  EXPECT_TRUE(std::equal(ya.values().begin(), ya.values().end(), yb.values().begin(), yb.values().end()));
  EXPECT_THROW(g.sequential("none"), FormatError);
}

TEST(Serialize, CorruptedByteIsChecksumError) {
  ModelFile f{"x", "", {}, {}};
  f.matrices.emplace_back("m", Eigen::MatrixXd::Ones(4, 4));
  const auto bytes = encode_model_file(f);
  for (std::size_t i = 4; i < bytes.size(); i += 7) {
    auto bad = bytes;
    bad[i] ^= 0x10;
    EXPECT_THROW(decode_model_file(bad), ChecksumError) << "byte " << i;
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 9);
  EXPECT_THROW(decode_model_file(truncated), FormatError);
}

TEST(Serialize, BadMagicAndVersion) {
  ModelFile f{"x", "", {}, {}};
  auto bytes = encode_model_file(f);
  auto magic = bytes;
  magic[0] = 'X';
  try {
    decode_model_file(magic);
    FAIL();
  } catch (const ChecksumError&) {
    FAIL() << "bad magic reported as checksum error";
  } catch (const FormatError&) {
  }
  bytes[4] = 2;
  reseal(bytes);
  EXPECT_THROW(decode_model_file(bytes), VersionError);
}

TEST(Serialize, UnknownBlockTypeReportsOffset) {
  ModelFile f{"x", "", {}, {}};
  f.matrices.emplace_back("m", Eigen::MatrixXd::Ones(1, 1));
  auto bytes = encode_model_file(f);
  // magic 4, version 4, method 4 + 1, config 4, count 4, name 4 + 1 -> type at 26.
  ASSERT_EQ(bytes[26], static_cast<std::uint8_t>(BlockType::kMatrix));
  bytes[26] = 9;
  reseal(bytes);
  try {
    decode_model_file(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 26"), std::string::npos) << e.what();
  }
}

class ModelRoundTrip : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = quick_config();
    const Toy t = toy_scenes(8, 5);
    rcnn_ = new RcnnModel(train_rcnn(t.images, t.gts, cfg_.rcnn));
    frcnn_ = new FrcnnModel(alternating_train(t.images, t.gts, cfg_.frcnn));
    probe_ = new Toy(toy_scenes(3, 6));
  }
  static void TearDownTestSuite() {
    delete rcnn_;
    delete frcnn_;
    delete probe_;
  }

  static inline RunConfig cfg_;
  static inline RcnnModel* rcnn_ = nullptr;
  static inline FrcnnModel* frcnn_ = nullptr;
  static inline Toy* probe_ = nullptr;
};

TEST_F(ModelRoundTrip, RcnnBitIdentical) {
  const fs::path dir = scratch("rcnn");
  save_model(*rcnn_, cfg_, dir / "m.bin");
  const auto loaded = load_rcnn_model(dir / "m.bin");
  EXPECT_EQ(dump_config(loaded.config), dump_config(cfg_));
  EXPECT_EQ(encode_model_file(rcnn_model_file(loaded.model, loaded.config)),
            encode_model_file(rcnn_model_file(*rcnn_, cfg_)));
  ASSERT_EQ(loaded.model.svms.size(), rcnn_->svms.size());
  EXPECT_EQ(loaded.model.svms[0].weights, rcnn_->svms[0].weights);
  EXPECT_EQ(loaded.model.svms[0].bias, rcnn_->svms[0].bias);
  EXPECT_EQ(loaded.model.ridges[0].weights, rcnn_->ridges[0].weights);
  EXPECT_EQ(loaded.model.ridges[0].lambda, rcnn_->ridges[0].lambda);
  for (const auto& img : probe_->images) {
    RcnnConfig c = cfg_.rcnn;
    c.score_thresh = -1e9;
    EXPECT_TRUE(same_detections(rcnn_detect(img, loaded.model, c), rcnn_detect(img, *rcnn_, c)));
  }
}

TEST_F(ModelRoundTrip, FasterRcnnBitIdentical) {
  const fs::path dir = scratch("frcnn");
  save_model(*frcnn_, cfg_, dir / "m.bin");
  const auto loaded = load_frcnn_model(dir / "m.bin");
  EXPECT_EQ(encode_model_file(frcnn_model_file(loaded.model, loaded.config)),
            encode_model_file(frcnn_model_file(*frcnn_, cfg_)));
  for (const auto& img : probe_->images) {
    FrcnnConfig c = cfg_.frcnn;
    c.det.score_thresh = 0;
    EXPECT_TRUE(same_detections(frcnn_detect(img, loaded.model, c), frcnn_detect(img, *frcnn_, c)));
  }
}

TEST_F(ModelRoundTrip, MethodTagEnforced) {
  const fs::path dir = scratch("tags");
  save_model(*rcnn_, cfg_, dir / "r.bin");
  save_model(*frcnn_, cfg_, dir / "f.bin");
  EXPECT_THROW(load_frcnn_model(dir / "r.bin"), MethodMismatchError);
  EXPECT_THROW(load_rcnn_model(dir / "f.bin"), MethodMismatchError);
  EXPECT_EQ(load_any_model(dir / "r.bin").method, kMethodRcnn);
  EXPECT_EQ(load_any_model(dir / "f.bin").method, kMethodFasterRcnn);
}

TEST_F(ModelRoundTrip, CorruptedModelFileIsChecksumError) {
  const fs::path dir = scratch("corrupt");
  save_model(*frcnn_, cfg_, dir / "m.bin");
  auto bytes = read_file_bytes(dir / "m.bin");
  bytes[bytes.size() / 2] ^= 0x01;
  write_file_bytes(dir / "m.bin", bytes);
  EXPECT_THROW(load_frcnn_model(dir / "m.bin"), ChecksumError);
  EXPECT_THROW(load_any_model(dir / "missing.bin"), IoError);
}

TEST_F(ModelRoundTrip, ConfigNotMatchingBlocksIsFormatError) {
  ModelFile f = frcnn_model_file(*frcnn_, cfg_);
  RunConfig other = cfg_;
  other.frcnn.rpn.anchor_scales = {12, 18};
  f.config_text = dump_config(other);
  EXPECT_THROW(frcnn_from_file(f), FormatError);
}

TEST(Base64, Rfc4648Vectors) {
  const std::vector<std::pair<std::string, std::string>> cases{
      {"", ""},          {"f", "Zg=="},         {"fo", "Zm8="},        {"foo", "Zm9v"},
      {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="}, {"foobar", "Zm9vYmFy"}};
  for (const auto& [in, out] : cases) {
    EXPECT_EQ(base64(std::vector<unsigned char>(in.begin(), in.end())), out) << in;
  }
}

TEST(Png, DecodesBackToQuantizedPixels) {
  Rng rng(8);
  Image img = make_image(5, 3);
  for (auto& v : img.values()) v = static_cast<float>(rng.uniform());
  const auto bytes = encode_png(img);
  const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_TRUE(std::equal(sig, sig + 8, bytes.begin()));
  png_image in{};
  in.version = PNG_IMAGE_VERSION;
  ASSERT_TRUE(png_image_begin_read_from_memory(&in, bytes.data(), bytes.size()));
  EXPECT_EQ(in.width, 5u);
  EXPECT_EQ(in.height, 3u);
  in.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> rgb(PNG_IMAGE_SIZE(in));
  ASSERT_TRUE(png_image_finish_read(&in, nullptr, rgb.data(), 0, nullptr));
  for (int c = 0; c < 3; ++c) {
    for (int p = 0; p < 15; ++p) EXPECT_EQ(rgb[p * 3 + c], quantize_channel(img[c * 15 + p]));
  }
}

TEST(Overlay, SvgIsWellFormedWithOneRectPerDetection) {
  namespace pt = boost::property_tree;
  const Image img = make_image(8, 6, 0.2f, 0.4f, 0.6f);
  const std::vector<Detection> dets{{0, kVehicle, {1, 1, 3, 2}, 0.9}, {0, kVehicle, {4, 2, 3, 3}, 0.4}};
  std::istringstream in(detection_overlay_svg(img, dets));
  pt::ptree tree;
  ASSERT_NO_THROW(pt::read_xml(in, tree));
  const auto& svg = tree.get_child("svg");
  EXPECT_EQ(svg.count("rect"), 2u);
  EXPECT_EQ(svg.count("image"), 1u);
  EXPECT_EQ(svg.get<std::string>("<xmlattr>.width"), "64");
  EXPECT_EQ(svg.get<std::string>("image.<xmlattr>.href").rfind("data:image/png;base64,", 0), 0u);
}
