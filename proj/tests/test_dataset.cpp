#include <gtest/gtest.h>

#include <cstdio>
#include <jpeglib.h>

#include "nmid/dataset.hpp"
#include "nmid/digest.hpp"
#include "support.hpp"

using namespace nmid;

namespace {

std::string encode_jpeg_gray(int h, int w, std::uint8_t value) {
  jpeg_compress_struct cinfo{};
  jpeg_error_mgr err{};
  cinfo.err = jpeg_std_error(&err);
  jpeg_create_compress(&cinfo);
  unsigned char* buf = nullptr;
  unsigned long size = 0;
  jpeg_mem_dest(&cinfo, &buf, &size);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = 1;
  cinfo.in_color_space = JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, 100, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w), value);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW r = row.data();
    jpeg_write_scanlines(&cinfo, &r, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::string out(reinterpret_cast<char*>(buf), size);
  jpeg_destroy_compress(&cinfo);
  std::free(buf);
  return out;
}

}  // namespace

TEST(Digest, KnownVectors) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(digest64("abc"), 0xba7816bf8f01cfeaULL);
  EXPECT_EQ(base64_encode("hello"), "aGVsbG8=");
  EXPECT_EQ(base64_decode("aGVsbG8="), "hello");
  EXPECT_EQ(base64_decode(base64_encode(std::string("\0\xff\x10", 3))), std::string("\0\xff\x10", 3));
  EXPECT_THROW(base64_decode("abc"), FormatError);
}

TEST(Image, PngRoundTrip) {
  RasterImage img(3, 4, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = ((y * 4 + x) * 3 + c) / 255.0;
  const RasterImage back = decode_image(encode_png(img));
  EXPECT_EQ(back, img);
  RasterImage gray(2, 2, 1, {0.0, 1.0, 0.5, 0.25});
  const RasterImage g2 = decode_png(encode_png(gray));
  EXPECT_EQ(g2.channels(), 1);
  EXPECT_NEAR(g2.at(1, 0, 0), 128 / 255.0, 1e-15);
}

TEST(Image, JpegDecode) {
  const RasterImage img = decode_image(encode_jpeg_gray(8, 8, 200));
  EXPECT_EQ(img.height(), 8);
  EXPECT_EQ(img.channels(), 1);
  EXPECT_NEAR(img.at(4, 4, 0), 200 / 255.0, 2 / 255.0);
  EXPECT_EQ(mime_for_bytes(encode_jpeg_gray(8, 8, 1)), "image/jpeg");
}

TEST(Image, RejectsGarbage) {
  EXPECT_THROW(decode_image("GIF89a...."), FormatError);
  EXPECT_THROW(RasterImage(0, 3, 1), ShapeError);
  EXPECT_THROW(RasterImage(2, 2, 2), ShapeError);
}

TEST(Image, ResizeAndChannels) {
  RasterImage img(4, 4, 1);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) img.at(y, x, 0) = x / 3.0;
  const RasterImage r = resize_bilinear(img, 2, 2);
  EXPECT_NEAR(r.at(0, 0, 0), 0.5 / 3.0, 1e-12);
  EXPECT_NEAR(r.at(0, 1, 0), 2.5 / 3.0, 1e-12);
  const RasterImage rgb = to_channels(img, 3);
  EXPECT_EQ(rgb.channels(), 3);
  EXPECT_EQ(rgb.at(1, 2, 1), img.at(1, 2, 0));
}

TEST(Preprocess, MiningZScore) {
  RasterImage img(2, 2, 1, {0.0, 0.2, 0.4, 0.6});
  const FeatureVector f = preprocess_mining(img, {2, 2, PreprocessMode::mining_zscore, 0});
  double mean = 0, var = 0;
  for (double v : f.values) mean += v / 4;
  for (double v : f.values) var += (v - mean) * (v - mean) / 4;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(var, 1.0, 1e-12);
  EXPECT_FALSE(f.constant);
  const FeatureVector c = preprocess_mining(RasterImage(2, 2, 1, {0.3, 0.3, 0.3, 0.3}), {2, 2, PreprocessMode::mining_zscore, 0});
  EXPECT_TRUE(c.constant);
  for (double v : c.values) EXPECT_EQ(v, 0.0);
}

TEST(Preprocess, EncoderSignedRange) {
  RasterImage img(2, 2, 1, {0.0, 1.0, 0.5, 0.25});
  const ImageTensor t = preprocess_encoder(img, {2, 2, PreprocessMode::encoder_signed, 3});
  EXPECT_EQ(t.channels, 3);
  EXPECT_EQ(t.at(0, 0, 0), -1.0);
  EXPECT_EQ(t.at(0, 1, 2), 1.0);
  EXPECT_EQ(t.at(1, 0, 1), 0.0);
  EXPECT_THROW(preprocess_encoder(img, {2, 2, PreprocessMode::mining_zscore, 0}), ValidationError);
}

TEST(Dataset, SyntheticIsDeterministic) {
  testkit::TempDir a, b;
  const DatasetManifest ma = generate_synthetic_dataset({3, 4, 16, 9}, a.path());
  const DatasetManifest mb = generate_synthetic_dataset({3, 4, 16, 9}, b.path());
  ASSERT_EQ(ma.size(), 12u);
  EXPECT_EQ(ma.labels(), (std::vector<std::string>{"biological", "fibers", "films"}));
  for (std::size_t i = 0; i < ma.size(); ++i) {
    EXPECT_EQ(ma.records()[i].id, mb.records()[i].id);
    EXPECT_EQ(read_file(ma.records()[i].path), read_file(mb.records()[i].path));
  }
}

TEST(Dataset, LoadSkipsUndecodableFiles) {
  testkit::TempDir dir;
  generate_synthetic_dataset({2, 3, 16, 1}, dir.path());
  write_file(dir / "biological/broken.png", "not an image");
  write_file(dir / "biological/notes.txt", "ignored");
  const LoadResult r = load_dataset(dir.path());
  EXPECT_EQ(r.manifest.size(), 6u);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_EQ(r.manifest.records()[0].id, "biological/img_0000");
  EXPECT_EQ(r.manifest.records()[0].label, "biological");
  EXPECT_THROW(load_dataset(dir / "missing"), IoError);
  fs::create_directories(dir / "empty_class");
  EXPECT_THROW(load_dataset(dir.path()), ValidationError);
}

TEST(Manifest, JsonlRoundTrip) {
  testkit::TempDir dir;
  ManifestRecord a{"x/1", "/d/x/1.png", "x", Split::train, 0.25, std::nullopt};
  ManifestRecord b{"y/2", "/d/y/2.png", "y", Split::test, std::nullopt, std::string("item-7")};
  DatasetManifest m({a, b});
  m.save(dir / "m.jsonl");
  const DatasetManifest back = DatasetManifest::load(dir / "m.jsonl");
  EXPECT_EQ(back.records(), m.records());
  EXPECT_EQ(back.filter(Split::test).size(), 1u);
  EXPECT_NE(m.to_jsonl().find("\"provenance\":\"item-7\""), std::string::npos);
  EXPECT_THROW(DatasetManifest({a, a}), ValidationError);
  write_file(dir / "bad.jsonl", "{\"id\": 3}\n");
  EXPECT_THROW(DatasetManifest::load(dir / "bad.jsonl"), Error);
}
