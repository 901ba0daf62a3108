#include "lmbf/patch.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace lmbf;
namespace fs = std::filesystem;
using TF = Tensor<float>;
using TD = Tensor<double>;

namespace {

std::string temp_path(const std::string& name) {
    static int counter = 0;
    return (fs::temp_directory_path() / ("lmbf_patch_" + std::to_string(::getpid()) + "_" +
                                         std::to_string(counter++) + "_" + name))
        .string();
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <typename T>
ImageRecord<T> zero_record(int64_t h, int64_t w, FeatureTag f = FeatureTag::vessels) {
    ImageRecord<T> r;
    r.id = "img";
    r.image = Tensor<T>::zeros({3, h, w});
    r.mask = Tensor<T>::zeros({1, h, w});
    r.feature_tag = f;
    return r;
}

} // namespace

// ---------------------------------------------------------------------------
// netpbm IO
// ---------------------------------------------------------------------------

TEST(Netpbm, P5HandPayload) {
    const std::string p = temp_path("hand.pgm");
    write_bytes(p, std::string("P5\n2 2\n255\n") + '\x00' + '\xff' + '\x80' + '\x40');
    TD img = load_netpbm<double>(p);
    ASSERT_EQ(img.shape(), (Shape{1, 2, 2}));
    EXPECT_DOUBLE_EQ(img.data()[0], 0.0);
    EXPECT_DOUBLE_EQ(img.data()[1], 1.0);
    EXPECT_NEAR(img.data()[2], 0.50196, 1e-5);
    EXPECT_NEAR(img.data()[3], 0.25098, 1e-5);
}

TEST(Netpbm, HeaderCommentsAndWhitespace) {
    const std::string p = temp_path("comment.pgm");
    write_bytes(p, std::string("P5 # gray\n# a comment line\n 2\t1 # sizes\n255\n") + '\x10' + '\x20');
    TD img = load_netpbm<double>(p);
    ASSERT_EQ(img.shape(), (Shape{1, 1, 2}));
    EXPECT_NEAR(img.data()[0], 16.0 / 255.0, 1e-12);
}

TEST(Netpbm, WriteLoadRoundTripBitwise) {
    std::mt19937 rng(3);
    TF img = TF::zeros({3, 5, 7});
    for (auto& v : img.data()) v = static_cast<float>(rng() % 256) / 255.0f;
    const std::string p = temp_path("rt.ppm");
    save_netpbm(p, img);
    TF back = load_netpbm<float>(p);
    ASSERT_EQ(back.shape(), img.shape());
    EXPECT_EQ(back.data(), img.data()); // values were already on the /255 grid
    // A second trip is exactly stable too.
    const std::string p2 = temp_path("rt2.ppm");
    save_netpbm(p2, back);
    EXPECT_EQ(load_netpbm<float>(p2).data(), back.data());
}

TEST(Netpbm, InterleavedColorOrder) {
    const std::string p = temp_path("rgb.ppm");
    write_bytes(p, std::string("P6\n1 1\n255\n") + '\xff' + '\x00' + '\x80');
    TD img = load_netpbm<double>(p);
    ASSERT_EQ(img.shape(), (Shape{3, 1, 1}));
    EXPECT_DOUBLE_EQ(img.data()[0], 1.0);
    EXPECT_DOUBLE_EQ(img.data()[1], 0.0);
    EXPECT_NEAR(img.data()[2], 128.0 / 255.0, 1e-12);
}

TEST(Netpbm, TruncatedPayloadNamesByteOffset) {
    const std::string p = temp_path("trunc.ppm");
    write_bytes(p, std::string("P6\n2 1\n255\n") + "\x01\x02\x03\x04\x05"); // need 6 bytes
    try {
        load_netpbm<double>(p);
        FAIL() << "expected parse_error";
    } catch (const parse_error& e) {
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos);
    }
}

TEST(Netpbm, RejectsBadMagicAndMaxval) {
    const std::string p1 = temp_path("ascii.pgm");
    write_bytes(p1, "P2\n2 2\n255\n0 1 2 3\n");
    EXPECT_THROW(load_netpbm<double>(p1), parse_error);
    const std::string p2 = temp_path("deep.pgm");
    write_bytes(p2, std::string("P5\n1 1\n65535\n") + "\x00\x00");
    EXPECT_THROW(load_netpbm<double>(p2), parse_error);
    const std::string p3 = temp_path("eof.pgm");
    write_bytes(p3, "P5\n2");
    EXPECT_THROW(load_netpbm<double>(p3), parse_error);
}

TEST(Netpbm, MaskLoaderBinarizes) {
    const std::string p = temp_path("mask.pgm");
    write_bytes(p, std::string("P5\n2 2\n255\n") + '\x00' + '\xff' + '\xfe' + '\x01');
    TD m = load_mask_pgm<double>(p);
    EXPECT_EQ(m.data(), (std::vector<double>{0, 1, 1, 0}));
}

// ---------------------------------------------------------------------------
// resize
// ---------------------------------------------------------------------------

TEST(Resize, DriveTargetShape) {
    TF img = TF::zeros({1, 584, 565});
    TF out = resize(img, 640, 640, ResizeMode::bilinear);
    EXPECT_EQ(out.shape(), (Shape{1, 640, 640}));
}

TEST(Resize, IdentityIsBitwise) {
    std::mt19937 rng(4);
    TD img = TD::zeros({2, 6, 5});
    for (auto& v : img.data()) v = static_cast<double>(rng() % 1000) / 999.0;
    EXPECT_EQ(resize(img, 6, 5, ResizeMode::bilinear).data(), img.data());
    EXPECT_EQ(resize(img, 6, 5, ResizeMode::nearest).data(), img.data());
}

TEST(Resize, BilinearHalfPixelHandValues) {
    TD img = TD::from_data({1, 1, 2}, {0.0, 1.0});
    TD out = resize(img, 1, 4, ResizeMode::bilinear);
    const std::vector<double> want{0.0, 0.25, 0.75, 1.0};
    for (size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.data()[i], want[i], 1e-12);
}

TEST(Resize, NearestKeepsMasksBinary) {
    std::mt19937 rng(5);
    TD m = TD::zeros({1, 11, 13});
    for (auto& v : m.data()) v = static_cast<double>(rng() % 2);
    TD up = resize(m, 29, 31, ResizeMode::nearest);
    for (double v : up.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    TD down = resize(m, 5, 7, ResizeMode::nearest);
    for (double v : down.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

// ---------------------------------------------------------------------------
// tile / stitch
// ---------------------------------------------------------------------------

TEST(Tile, GridCountsMatchResizedSizes) {
    struct Row {
        int64_t h, w, patch, per_image, images, total;
    };
    const Row rows[] = {
        {640, 640, 128, 25, 20, 500},     // DRIVE
        {640, 640, 128, 25, 10, 250},     // STARE
        {1024, 1024, 128, 64, 20, 1280},  // CHASE
        {2304, 3456, 128, 486, 23, 11178} // HRF
    };
    for (const auto& r : rows) {
        auto rec = zero_record<float>(r.h, r.w);
        const auto patches = tile(rec, r.patch);
        EXPECT_EQ(static_cast<int64_t>(patches.size()), r.per_image)
            << r.h << "x" << r.w << "/" << r.patch;
        EXPECT_EQ(static_cast<int64_t>(patches.size()) * r.images, r.total);
    }
}

TEST(Tile, LesionGridCount) {
    auto rec = zero_record<float>(2816, 4096);
    const auto patches = tile(rec, 256);
    EXPECT_EQ(patches.size(), 176u);
    EXPECT_EQ(176 * 54, 9504);
    EXPECT_EQ(176 * 26, 4576);
    EXPECT_EQ(176 * 53, 9328);
}

TEST(Tile, RowMajorOrderAndContent) {
    ImageRecord<double> rec;
    rec.id = "t";
    rec.image = TD::zeros({1, 4, 6});
    rec.mask = TD::zeros({1, 4, 6});
    for (int64_t i = 0; i < 24; ++i) rec.image.data()[i] = static_cast<double>(i);
    rec.mask.data()[7] = 1.0; // row 1, col 1 -> patch (0,0) holds it
    auto ps = tile(rec, 2);
    ASSERT_EQ(ps.size(), 6u);
    EXPECT_EQ(ps[0].grid_row, 0);
    EXPECT_EQ(ps[0].grid_col, 0);
    EXPECT_EQ(ps[1].grid_col, 1);
    EXPECT_EQ(ps[3].grid_row, 1);
    EXPECT_EQ(ps[3].grid_col, 0);
    EXPECT_EQ(ps[1].image_patch.data(), (std::vector<double>{2, 3, 8, 9}));
    EXPECT_EQ(ps[0].fg_pixels, 1);
    EXPECT_EQ(ps[1].fg_pixels, 0);
}

TEST(Tile, RejectsNonDivisibleExtent) {
    auto rec = zero_record<double>(6, 7);
    EXPECT_THROW(tile(rec, 2), shape_error);
}

TEST(Tile, StitchInvertsTileBitwise) {
    std::mt19937 rng(6);
    ImageRecord<double> rec;
    rec.id = "s";
    rec.image = TD::zeros({3, 8, 12});
    rec.mask = TD::zeros({1, 8, 12});
    for (auto& v : rec.image.data()) v = static_cast<double>(rng() % 997) / 996.0;
    for (auto& v : rec.mask.data()) v = static_cast<double>(rng() % 2);
    auto ps = tile(rec, 4);
    std::vector<TD> imgs, masks;
    for (auto& p : ps) {
        imgs.push_back(p.image_patch);
        masks.push_back(p.mask_patch);
    }
    EXPECT_EQ(stitch(imgs, 2, 3).data(), rec.image.data());
    EXPECT_EQ(stitch(masks, 2, 3).data(), rec.mask.data());
}

TEST(Stitch, RejectsBadTileSets) {
    std::vector<TD> tiles{TD::zeros({1, 2, 2}), TD::zeros({1, 2, 2})};
    EXPECT_THROW(stitch(tiles, 2, 2), contract_error);
    tiles.push_back(TD::zeros({1, 2, 3}));
    tiles.push_back(TD::zeros({1, 2, 2}));
    EXPECT_THROW(stitch(tiles, 2, 2), contract_error);
}

// ---------------------------------------------------------------------------
// select
// ---------------------------------------------------------------------------

TEST(Select, VesselsKeepEverything) {
    auto rec = zero_record<double>(4, 4);
    auto [kept, discarded] = select(tile(rec, 2), FeatureTag::vessels);
    EXPECT_EQ(kept.size(), 4u);
    EXPECT_TRUE(discarded.empty());
    for (const auto& p : kept) EXPECT_TRUE(p.kept);
}

TEST(Select, LesionDropsEmptyPatches) {
    ImageRecord<double> rec = zero_record<double>(4, 4, FeatureTag::hard_exudates);
    rec.mask.data()[0] = 1.0; // only patch (0,0) has pathology
    auto [kept, discarded] = select(tile(rec, 2), FeatureTag::hard_exudates, 1);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_EQ(discarded.size(), 3u);
    EXPECT_EQ(kept[0].grid_row, 0);
    EXPECT_EQ(kept[0].grid_col, 0);
    for (const auto& p : discarded) EXPECT_FALSE(p.kept);
}

TEST(Select, PartitionsInput) {
    std::mt19937 rng(7);
    ImageRecord<double> rec = zero_record<double>(8, 8, FeatureTag::haemorrhages);
    for (auto& v : rec.mask.data()) v = static_cast<double>(rng() % 2 == 0 ? 0 : 1) * (rng() % 3 == 0);
    auto patches = tile(rec, 2);
    auto [kept, discarded] = select(patches, FeatureTag::haemorrhages, 2);
    EXPECT_EQ(kept.size() + discarded.size(), patches.size());
    for (const auto& p : kept) EXPECT_GE(p.fg_pixels, 2);
    for (const auto& p : discarded) EXPECT_LT(p.fg_pixels, 2);
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

namespace {
PatchRecord<double> sample_patch() {
    ImageRecord<double> rec;
    rec.id = "a";
    rec.image = TD::zeros({2, 4, 4});
    rec.mask = TD::zeros({1, 4, 4});
    std::mt19937 rng(8);
    for (auto& v : rec.image.data()) v = static_cast<double>(rng() % 100) / 99.0;
    for (auto& v : rec.mask.data()) v = static_cast<double>(rng() % 2);
    return tile(rec, 4)[0];
}
} // namespace

TEST(Augment, EmitsSixVariants) {
    auto vs = augment(sample_patch(), 1);
    EXPECT_EQ(vs.size(), 6u);
    // First variant is the untouched original.
    EXPECT_EQ(vs[0].image_patch.data(), sample_patch().image_patch.data());
}

TEST(Augment, HorizontalFlipIsInvolution) {
    auto p = sample_patch();
    auto once = augment(p, 1)[1];
    auto twice = augment(once, 1)[1];
    EXPECT_EQ(twice.image_patch.data(), p.image_patch.data());
    EXPECT_EQ(twice.mask_patch.data(), p.mask_patch.data());
}

TEST(Augment, Rot90ThenRot270IsIdentity) {
    auto p = sample_patch();
    auto r90 = augment(p, 1)[3];
    auto back = augment(r90, 1)[5];
    EXPECT_EQ(back.image_patch.data(), p.image_patch.data());
    EXPECT_EQ(back.mask_patch.data(), p.mask_patch.data());
}

TEST(Augment, VariantsDifferAndPreserveForeground) {
    auto p = sample_patch();
    auto vs = augment(p, 1);
    for (const auto& v : vs) {
        EXPECT_EQ(v.fg_pixels, p.fg_pixels);
        EXPECT_EQ(v.source_id, p.source_id);
    }
    // Rotation by 180 must move at least one pixel of this random patch.
    EXPECT_NE(vs[4].image_patch.data(), p.image_patch.data());
}

// ---------------------------------------------------------------------------
// synth_fundus
// ---------------------------------------------------------------------------

TEST(Synth, DeterministicPerSeed) {
    for (FeatureTag f : {FeatureTag::vessels, FeatureTag::hard_exudates, FeatureTag::optic_disc}) {
        auto a = synth_fundus<float>(42, 64, f);
        auto b = synth_fundus<float>(42, 64, f);
        EXPECT_EQ(a.image.data(), b.image.data());
        EXPECT_EQ(a.mask.data(), b.mask.data());
        EXPECT_EQ(a.id, b.id);
    }
}

TEST(Synth, MaskDensityWithinContract) {
    for (int64_t size : {32, 64, 128}) {
        for (FeatureTag f : {FeatureTag::vessels, FeatureTag::hard_exudates,
                             FeatureTag::microaneurysms, FeatureTag::haemorrhages,
                             FeatureTag::optic_disc}) {
            for (uint64_t seed : {1ull, 2ull, 9ull}) {
                auto r = synth_fundus<float>(seed, size, f);
                const int64_t fg = count_foreground(r.mask);
                EXPECT_GT(fg, 0) << "size " << size << " seed " << seed;
                EXPECT_LT(fg, size * size / 2) << "size " << size << " seed " << seed;
            }
        }
    }
}

TEST(Synth, DifferentSeedsDifferentMasks) {
    auto a = synth_fundus<float>(1, 64, FeatureTag::vessels);
    auto b = synth_fundus<float>(2, 64, FeatureTag::vessels);
    EXPECT_NE(a.mask.data(), b.mask.data());
}

TEST(Synth, ImageInUnitRangeWithDarkSurround) {
    auto r = synth_fundus<float>(5, 64, FeatureTag::vessels);
    for (float v : r.image.data()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
    // A corner pixel sits outside the circular field of view.
    EXPECT_LT(r.image.data()[0], 0.1f);
}

TEST(Synth, RejectsTinySizes) {
    EXPECT_THROW(synth_fundus<float>(1, 31, FeatureTag::vessels), config_error);
}

// ---------------------------------------------------------------------------
// vessel distractors (hard negatives)
// ---------------------------------------------------------------------------

TEST(Distractors, DeterministicAndMaskUntouched) {
    // Records share tensor storage on copy, so build three independent ones.
    auto base = synth_fundus<float>(7, 64, FeatureTag::vessels);
    auto a = synth_fundus<float>(7, 64, FeatureTag::vessels);
    auto b = synth_fundus<float>(7, 64, FeatureTag::vessels);
    add_vessel_distractors(a, 99, 10);
    add_vessel_distractors(b, 99, 10);
    EXPECT_EQ(a.image.data(), b.image.data());          // same seed, same pixels
    EXPECT_EQ(a.mask.data(), base.mask.data());         // labels never change
    EXPECT_NE(a.image.data(), base.image.data());       // but pixels do
}

TEST(Distractors, ChangedPixelsAreUnlabeledAndInRange) {
    auto base = synth_fundus<float>(3, 64, FeatureTag::vessels);
    auto aug = synth_fundus<float>(3, 64, FeatureTag::vessels);
    add_vessel_distractors(aug, 123, 12);
    const int64_t hw = 64 * 64;
    int64_t changed = 0;
    for (int64_t i = 0; i < hw; ++i) {
        const bool differs = aug.image.data()[i] != base.image.data()[i] ||
                             aug.image.data()[hw + i] != base.image.data()[hw + i] ||
                             aug.image.data()[2 * hw + i] != base.image.data()[2 * hw + i];
        if (!differs) continue;
        ++changed;
        EXPECT_EQ(aug.mask.data()[i], 0.0f);            // distractors are pure negatives
        for (int c = 0; c < 3; ++c) {
            EXPECT_GE(aug.image.data()[c * hw + i], 0.0f);
            EXPECT_LE(aug.image.data()[c * hw + i], 1.0f);
        }
    }
    EXPECT_GT(changed, 100);                            // several segments landed
}

TEST(Distractors, DifferentSeedsDiffer) {
    auto a = synth_fundus<float>(4, 64, FeatureTag::vessels);
    auto b = synth_fundus<float>(4, 64, FeatureTag::vessels);
    add_vessel_distractors(a, 1, 8);
    add_vessel_distractors(b, 2, 8);
    EXPECT_NE(a.image.data(), b.image.data());
}

TEST(Distractors, RejectsNonSquare) {
    ImageRecord<float> rec;
    rec.image = Tensor<float>::zeros({3, 32, 48});
    rec.mask = Tensor<float>::zeros({1, 32, 48});
    EXPECT_THROW(add_vessel_distractors(rec, 1, 4), contract_error);
}

// ---------------------------------------------------------------------------
// dataset IO + manifest
// ---------------------------------------------------------------------------

TEST(DatasetIO, SaveLoadRoundTrip) {
    const std::string root = temp_path("ds");
    std::vector<ImageRecord<float>> recs;
    for (uint64_t s : {11ull, 12ull, 13ull}) recs.push_back(synth_fundus<float>(s, 32, FeatureTag::vessels));
    save_dataset(root, "train", recs);
    auto loaded = load_dataset<float>(root, "train", DatasetTag::SYNTH, FeatureTag::vessels);
    ASSERT_EQ(loaded.size(), 3u);
    EXPECT_EQ(loaded[0].id, "synth-11");
    EXPECT_EQ(loaded[2].id, "synth-13");
    for (size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(loaded[i].mask.data(), recs[i].mask.data()); // masks are already binary
        EXPECT_EQ(loaded[i].image.shape(), recs[i].image.shape());
        // Images go through /255 quantization once; a second trip is stable.
        const std::string again = temp_path("ds2");
        save_dataset(again, "t", std::vector<ImageRecord<float>>{loaded[i]});
        EXPECT_EQ(load_dataset<float>(again, "t", DatasetTag::SYNTH, FeatureTag::vessels)[0].image.data(),
                  loaded[i].image.data());
    }
}

TEST(DatasetIO, MissingMaskIsContractError) {
    const std::string root = temp_path("dsmiss");
    save_dataset(root, "train",
                 std::vector<ImageRecord<float>>{synth_fundus<float>(3, 32, FeatureTag::vessels)});
    fs::remove(fs::path(root) / "train" / "masks" / "synth-3.pgm");
    EXPECT_THROW(load_dataset<float>(root, "train", DatasetTag::SYNTH, FeatureTag::vessels),
                 contract_error);
}

TEST(Manifest, CsvFormat) {
    ImageRecord<double> rec = zero_record<double>(4, 2, FeatureTag::hard_exudates);
    rec.id = "idr-7";
    rec.mask.data()[0] = 1.0;
    rec.mask.data()[1] = 1.0;
    auto ps = tile(rec, 2);
    ps[1].kept = false;
    std::ostringstream os;
    write_manifest(os, ps);
    EXPECT_EQ(os.str(),
              "source_id,grid_row,grid_col,fg_pixels,kept\n"
              "idr-7,0,0,2,1\n"
              "idr-7,1,0,0,0\n");
}
