#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "refface/autodiff.hpp"
#include "refface/checkpoint.hpp"
#include "refface/image.hpp"
#include "refface/nn.hpp"
#include "refface/rng.hpp"

using namespace refface;
namespace fs = std::filesystem;

namespace {

// Central-difference check of dL/dx for a scalar-valued graph builder.
// Returns the max relative error over all coordinates of x.
double gradcheck(const Tensor& x0, const std::function<ad::Var(const ad::Var&)>& f,
                 double h = 1e-4) {
    ad::Var x = ad::make_leaf(x0, true);
    ad::Var loss = f(x);
    ad::backward(loss);
    Tensor analytic = x.grad();

    double max_rel = 0.0;
    Tensor xp = x0;
    for (int64_t i = 0; i < x0.numel(); i++) {
        xp.data[i] = x0.data[i] + h;
        ad::Var a = ad::make_leaf(xp, false);
        const double lp = f(a).scalar();
        xp.data[i] = x0.data[i] - h;
        ad::Var b = ad::make_leaf(xp, false);
        const double lm = f(b).scalar();
        xp.data[i] = x0.data[i];
        const double numeric = (lp - lm) / (2 * h);
        const double denom = std::max({std::abs(numeric), std::abs(analytic.data[i]), 1e-4});
        max_rel = std::max(max_rel, std::abs(numeric - analytic.data[i]) / denom);
    }
    return max_rel;
}

ad::Var sq_sum(const ad::Var& v) { return ad::sum_all(ad::mul(v, v)); }

}  // namespace

TEST_CASE("rng determinism and moments") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; i++) CHECK(a.next_u64() == b.next_u64());

    Rng r(7);
    double mean = 0, var = 0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (int i = 0; i < n; i++) {
        xs[i] = r.normal();
        mean += xs[i];
    }
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.05);

    CHECK(Rng::derive(1, 2) != Rng::derive(1, 3));
    CHECK(Rng::derive(1, 2) == Rng::derive(1, 2));
}

TEST_CASE("elementwise op gradients") {
    Rng rng(1);
    Tensor x = Tensor::randn({3, 4}, rng);
    CHECK(gradcheck(x, [](const ad::Var& v) { return ad::sum_all(v); }) < 1e-5);
    CHECK(gradcheck(x, [](const ad::Var& v) { return ad::mean_all(ad::mul(v, v)); }) < 1e-5);
    CHECK(gradcheck(x, [](const ad::Var& v) {
              return ad::sum_all(ad::silu(ad::scale(v, 1.7)));
          }) < 1e-5);
    CHECK(gradcheck(x, [](const ad::Var& v) {
              return ad::sum_all(ad::mul(ad::add_scalar(v, 0.3), ad::sub(v, ad::scale(v, 2.0))));
          }) < 1e-5);
}

TEST_CASE("matmul / linear gradients") {
    Rng rng(2);
    Tensor a = Tensor::randn({3, 5}, rng);
    Tensor b = Tensor::randn({5, 4}, rng);
    ad::Var vb = ad::make_leaf(b, true);
    CHECK(gradcheck(a, [&](const ad::Var& v) { return sq_sum(ad::matmul(v, vb)); }) < 1e-5);
    ad::Var va = ad::make_leaf(a, true);
    CHECK(gradcheck(b, [&](const ad::Var& v) { return sq_sum(ad::matmul(va, v)); }) < 1e-5);

    Tensor x = Tensor::randn({2, 3, 5}, rng);
    Tensor w = Tensor::randn({4, 5}, rng);
    Tensor bias = Tensor::randn({4}, rng);
    ad::Var vw = ad::make_leaf(w, true);
    ad::Var vbias = ad::make_leaf(bias, true);
    CHECK(gradcheck(x, [&](const ad::Var& v) { return sq_sum(ad::linear(v, vw, vbias)); }) < 1e-5);
    ad::Var vx = ad::make_leaf(x, true);
    CHECK(gradcheck(w, [&](const ad::Var& v) { return sq_sum(ad::linear(vx, v, vbias)); }) < 1e-5);
    CHECK(gradcheck(bias, [&](const ad::Var& v) { return sq_sum(ad::linear(vx, vw, v)); }) < 1e-5);
}

TEST_CASE("conv2d gradients") {
    Rng rng(3);
    for (int stride : {1, 2}) {
        Tensor x = Tensor::randn({2, 3, 6, 6}, rng);
        Tensor w = Tensor::randn({4, 3, 3, 3}, rng);
        Tensor b = Tensor::randn({4}, rng);
        ad::Var vw = ad::make_leaf(w, true);
        ad::Var vb = ad::make_leaf(b, true);
        CHECK(gradcheck(x, [&](const ad::Var& v) {
                  return sq_sum(ad::conv2d(v, vw, vb, stride, 1));
              }) < 1e-5);
        ad::Var vx = ad::make_leaf(x, true);
        CHECK(gradcheck(w, [&](const ad::Var& v) {
                  return sq_sum(ad::conv2d(vx, v, vb, stride, 1));
              }) < 1e-5);
        CHECK(gradcheck(b, [&](const ad::Var& v) {
                  return sq_sum(ad::conv2d(vx, vw, v, stride, 1));
              }) < 1e-5);
    }
}

TEST_CASE("upsample / pool / norm gradients") {
    Rng rng(4);
    Tensor x = Tensor::randn({2, 4, 4, 4}, rng);
    CHECK(gradcheck(x, [](const ad::Var& v) { return sq_sum(ad::upsample2x(v)); }) < 1e-5);
    CHECK(gradcheck(x, [](const ad::Var& v) { return sq_sum(ad::global_avg_pool(v)); }) < 1e-5);

    Tensor gamma = Tensor::randn({4}, rng);
    Tensor beta = Tensor::randn({4}, rng);
    ad::Var vg = ad::make_leaf(gamma, true);
    ad::Var vbeta = ad::make_leaf(beta, true);
    CHECK(gradcheck(x, [&](const ad::Var& v) {
              return sq_sum(ad::group_norm(v, vg, vbeta, 2));
          }) < 1e-5);
    ad::Var vx = ad::make_leaf(x, true);
    CHECK(gradcheck(gamma, [&](const ad::Var& v) {
              return sq_sum(ad::group_norm(vx, v, vbeta, 2));
          }) < 1e-5);
    CHECK(gradcheck(beta, [&](const ad::Var& v) {
              return sq_sum(ad::group_norm(vx, vg, v, 2));
          }) < 1e-5);

    Tensor tk = Tensor::randn({2, 3, 4}, rng);
    CHECK(gradcheck(tk, [&](const ad::Var& v) {
              return sq_sum(ad::layer_norm(v, vg, vbeta));
          }) < 1e-5);
    CHECK(gradcheck(tk, [](const ad::Var& v) { return sq_sum(ad::l2_normalize_rows(v)); }) < 1e-5);
}

TEST_CASE("masked attention gradients and mask semantics") {
    Rng rng(5);
    Tensor q = Tensor::randn({2, 3, 4}, rng);
    Tensor k = Tensor::randn({2, 5, 4}, rng);
    Tensor v = Tensor::randn({2, 5, 4}, rng);
    std::vector<uint8_t> mask = {1, 1, 0, 1, 0, /* sample 2 */ 1, 1, 1, 1, 1};

    ad::Var vk = ad::make_leaf(k, true);
    ad::Var vv = ad::make_leaf(v, true);
    CHECK(gradcheck(q, [&](const ad::Var& x) {
              return sq_sum(ad::masked_attention(x, vk, vv, mask));
          }) < 1e-5);
    ad::Var vq = ad::make_leaf(q, true);
    CHECK(gradcheck(k, [&](const ad::Var& x) {
              return sq_sum(ad::masked_attention(vq, x, vv, mask));
          }) < 1e-5);
    CHECK(gradcheck(v, [&](const ad::Var& x) {
              return sq_sum(ad::masked_attention(vq, vk, x, mask));
          }) < 1e-5);

    SUBCASE("masked lanes are bit-identical to removed lanes") {
        // sample 0 with lanes {0,1,3} active vs a 3-lane tensor of those rows
        Tensor q1({1, 3, 4}), k_sub({1, 3, 4}), v_sub({1, 3, 4}), k_full({1, 5, 4}),
            v_full({1, 5, 4});
        for (int64_t i = 0; i < 12; i++) q1.data[i] = q.data[i];
        const int64_t keep[3] = {0, 1, 3};
        for (int64_t l = 0; l < 5; l++)
            for (int64_t d = 0; d < 4; d++) {
                k_full.data[l * 4 + d] = k.data[l * 4 + d];
                v_full.data[l * 4 + d] = v.data[l * 4 + d];
            }
        for (int64_t l = 0; l < 3; l++)
            for (int64_t d = 0; d < 4; d++) {
                k_sub.data[l * 4 + d] = k.data[keep[l] * 4 + d];
                v_sub.data[l * 4 + d] = v.data[keep[l] * 4 + d];
            }
        std::vector<uint8_t> m_full = {1, 1, 0, 1, 0};
        std::vector<uint8_t> m_sub = {1, 1, 1};
        ad::Var o1 = ad::masked_attention(ad::make_const(q1), ad::make_const(k_full),
                                          ad::make_const(v_full), m_full);
        ad::Var o2 = ad::masked_attention(ad::make_const(q1), ad::make_const(k_sub),
                                          ad::make_const(v_sub), m_sub);
        for (int64_t i = 0; i < o1.val().numel(); i++)
            CHECK(o1.val().data[i] == o2.val().data[i]);
    }

    SUBCASE("all-masked rows produce zero output") {
        std::vector<uint8_t> none(10, 0);
        ad::Var o = ad::masked_attention(ad::make_const(q), ad::make_const(k),
                                         ad::make_const(v), none);
        for (double x : o.val().data) CHECK(x == 0.0);
    }
}

TEST_CASE("shape op gradients") {
    Rng rng(6);
    Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
    CHECK(gradcheck(x, [](const ad::Var& v) {
              return sq_sum(ad::reshape(v, {2, 48}));
          }) < 1e-5);
    CHECK(gradcheck(x, [](const ad::Var& v) { return sq_sum(ad::chw_to_tokens(v)); }) < 1e-5);
    CHECK(gradcheck(x, [](const ad::Var& v) {
              return sq_sum(ad::tokens_to_chw(ad::chw_to_tokens(v), 3, 4, 4));
          }) < 1e-5);
    CHECK(gradcheck(x, [](const ad::Var& v) { return sq_sum(ad::patchify(v, 2)); }) < 1e-5);
    CHECK(gradcheck(x, [](const ad::Var& v) {
              return sq_sum(ad::unpatchify(ad::patchify(v, 2), 3, 4, 4, 2));
          }) < 1e-5);

    Tensor y = Tensor::randn({2, 2, 4, 4}, rng);
    ad::Var vy = ad::make_leaf(y, true);
    CHECK(gradcheck(x, [&](const ad::Var& v) { return sq_sum(ad::concat(v, vy, 1)); }) < 1e-5);
    CHECK(gradcheck(x, [](const ad::Var& v) { return sq_sum(ad::slice(v, 1, 1, 2)); }) < 1e-5);

    // patchify/unpatchify is an exact inverse
    ad::Var px = ad::unpatchify(ad::patchify(ad::make_const(x), 2), 3, 4, 4, 2);
    for (int64_t i = 0; i < x.numel(); i++) CHECK(px.val().data[i] == x.data[i]);
}

TEST_CASE("indexed op gradients") {
    Rng rng(7);
    Tensor table = Tensor::randn({5, 3}, rng);
    std::vector<int64_t> idx = {0, 2, 2, 4};
    CHECK(gradcheck(table, [&](const ad::Var& v) {
              return sq_sum(ad::gather_rows(v, idx));
          }) < 1e-5);

    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor s = Tensor::randn({3}, rng);
    ad::Var vs = ad::make_leaf(s, true);
    CHECK(gradcheck(x, [&](const ad::Var& v) { return sq_sum(ad::rows_scale(v, vs)); }) < 1e-5);
    ad::Var vx = ad::make_leaf(x, true);
    CHECK(gradcheck(s, [&](const ad::Var& v) { return sq_sum(ad::rows_scale(vx, v)); }) < 1e-5);

    Tensor y = Tensor::randn({3, 4}, rng);
    ad::Var vy = ad::make_leaf(y, true);
    CHECK(gradcheck(x, [&](const ad::Var& v) { return sq_sum(ad::rows_dot(v, vy)); }) < 1e-5);

    Tensor img = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor bias = Tensor::randn({2, 3}, rng);
    ad::Var vbias = ad::make_leaf(bias, true);
    CHECK(gradcheck(img, [&](const ad::Var& v) {
              return sq_sum(ad::add_channel_bias(v, vbias));
          }) < 1e-5);
    CHECK(gradcheck(bias, [&](const ad::Var& v) {
              return sq_sum(ad::add_channel_bias(ad::make_leaf(img, true), v));
          }) < 1e-5);

    Tensor a = Tensor::randn({2, 3, 4}, rng);
    Tensor b = Tensor::randn({2, 3, 4}, rng);
    std::vector<uint8_t> cond = {1, 0, 1, 0, 0, 1};
    ad::Var vb2 = ad::make_leaf(b, true);
    CHECK(gradcheck(a, [&](const ad::Var& v) {
              return sq_sum(ad::select_tokens(cond, v, vb2));
          }) < 1e-5);
}

TEST_CASE("loss op gradients") {
    Rng rng(8);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({3, 4}, rng);
    ad::Var vb = ad::make_leaf(b, true);
    CHECK(gradcheck(a, [&](const ad::Var& v) { return ad::l1_loss(v, vb); }) < 1e-5);
    CHECK(gradcheck(a, [&](const ad::Var& v) { return ad::mse_loss(v, vb); }) < 1e-5);

    Tensor logits = Tensor::randn({4, 5}, rng);
    std::vector<int64_t> labels = {1, 0, 4, 2};
    CHECK(gradcheck(logits, [&](const ad::Var& v) {
              return ad::softmax_xent(v, labels);
          }) < 1e-5);
    CHECK(gradcheck(logits, [&](const ad::Var& v) {
              return ad::softmax_xent(ad::arc_margin(ad::scale(v, 0.3), labels, 0.3), labels);
          }) < 1e-5);
}

TEST_CASE("no-grad mode skips graph recording") {
    Rng rng(9);
    Tensor x = Tensor::randn({2, 2}, rng);
    ad::NoGradGuard guard;
    ad::Var v = ad::make_leaf(x, true);
    ad::Var y = ad::mul(v, v);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("adam reduces a quadratic") {
    Rng rng(10);
    nn::ParamStore ps;
    ad::Var w = ps.add("w", Tensor::randn({8}, rng));
    nn::Adam opt(ps, 0.05);
    double first = 0, last = 0;
    for (int i = 0; i < 200; i++) {
        opt.zero_grad();
        ad::Var loss = ad::sum_all(ad::mul(w, w));
        if (i == 0) first = loss.scalar();
        last = loss.scalar();
        ad::backward(loss);
        opt.step();
    }
    CHECK(last < 0.01 * first);
}

TEST_CASE("param store hash and freeze") {
    Rng rng(11);
    nn::ParamStore ps;
    ad::Var w = ps.add("w", Tensor::randn({4}, rng));
    const uint64_t h0 = ps.params_hash();
    ps.set_trainable(false);
    CHECK_FALSE(w.requires_grad());
    CHECK(ps.params_hash() == h0);
    w.node()->value.data[0] += 1.0;
    CHECK(ps.params_hash() != h0);
}

TEST_CASE("checkpoint round trip and hash verification") {
    Rng rng(12);
    const fs::path dir = fs::temp_directory_path() / "refface_ckpt_test";
    fs::create_directories(dir);
    const std::string path = (dir / "model.bin").string();

    Checkpoint ck;
    ck.kind = Checkpoint::kDenoiser;
    ck.seed = 99;
    ck.meta["width"] = 16;
    ck.tensors["w"] = Tensor::randn({3, 4}, rng);
    save_checkpoint(path, ck);

    Checkpoint back = load_checkpoint(path, Checkpoint::kDenoiser);
    CHECK(back.seed == 99);
    CHECK(back.meta_at("width") == 16);
    CHECK(back.tensors.at("w").data == ck.tensors.at("w").data);

    // corrupt one payload byte: load must fail the hash check
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(64);
        char byte = 0x5A;
        f.write(&byte, 1);
    }
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    CHECK_THROWS_AS(load_checkpoint((dir / "absent.bin").string()), MissingArtifactError);
    fs::remove_all(dir);
}

TEST_CASE("png round trip") {
    const fs::path dir = fs::temp_directory_path() / "refface_png_test";
    fs::create_directories(dir);
    Rng rng(13);
    Image img(9, 7, 3);
    for (double& v : img.data) v = rng.uniform();
    const std::string path = (dir / "img.png").string();
    write_png(path, img);
    Image back = read_png(path);
    REQUIRE(back.h == 9);
    REQUIRE(back.w == 7);
    for (size_t i = 0; i < img.data.size(); i++)
        CHECK(std::abs(back.data[i] - img.data[i]) <= 0.5 / 255.0 + 1e-9);
    fs::remove_all(dir);
}

TEST_CASE("image helpers") {
    Rng rng(14);
    Image img(16, 16, 3);
    for (double& v : img.data) v = rng.uniform();

    Image small = resize_bilinear(img, 8, 8);
    CHECK(small.h == 8);
    Image back = resize_bilinear(small, 16, 16);
    CHECK(back.h == 16);

    Image blurred = gaussian_blur(img, 1.0);
    CHECK(std::abs(blurred.mean() - img.mean()) < 0.02);

    Image flipped = flip_horizontal(flip_horizontal(img));
    CHECK(flipped.data == img.data);

    CHECK(psnr(img, img) == 99.0);
    CHECK(ssim(img, img) == doctest::Approx(1.0).epsilon(1e-9));

    // quality 100 bypasses quantization
    Image same = dct_compress(img, 100);
    CHECK(same.data == img.data);
    Image crushed = dct_compress(img, 10);
    CHECK(psnr(img, crushed) < psnr(img, dct_compress(img, 90)));
}
